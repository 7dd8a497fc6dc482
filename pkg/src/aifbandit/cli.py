"""Command line entry point: ``aifbandit {generate-env,train,simulate,report}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.

The configuration file is flat ``key = value`` text with dotted keys, e.g.::

    run.runs = 100
    schedule.kind = "dynamic"
    agent.aif.gamma = 30

It is read as TOML, so strings need quotes.  Unknown keys are rejected.
Labels given in the file or on the command line are 1-based.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from aifbandit.agents import AGENT_KINDS
from aifbandit.dataset import DatasetError, TableSchema, TrainOptions, ingest_table, save_report, train_pipeline
from aifbandit.environment import EnvSpec, generate_environment, load_environment, save_environment
from aifbandit.harness import (
    ConfigError,
    ExperimentConfig,
    RunAborted,
    emit_outputs,
    run_experiment,
    summarize,
)
from aifbandit.laplace import LaplaceError
from aifbandit.model import ContractError

log = logging.getLogger("aifbandit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# every accepted dotted key and its value type
_KEYS = {
    "env.path": str,
    "env.options": int,
    "env.labels": int,
    "env.features": int,
    "env.pool_size": int,
    "env.param_scale": float,
    "env.pool_mean_scale": float,
    "env.seed": int,
    "run.horizon": int,
    "run.runs": int,
    "run.seed": int,
    "run.workers": int,
    "run.output": str,
    "run.agents": list,
    "run.regret": str,
    "schedule.kind": str,
    "schedule.labels": list,
    "schedule.n_preferred": int,
    "schedule.period": int,
    "schedule.mass": float,
    "belief.mean": float,
    "belief.scale": float,
    "agent.egreedy.epsilon": float,
    "agent.softmax.tau": float,
    "agent.ucb.c": float,
    "agent.aif.gamma": float,
    "agent.aif.extrinsic": str,
}


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def read_config(path) -> dict:
    """Parse a config file into ``{dotted key: value}``, checking keys and types."""
    try:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    flat = _flatten(tree)
    for key, value in flat.items():
        if key not in _KEYS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        want = _KEYS[key]
        ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(f"{path}: {key} must be {want.__name__}, got {value!r}")
    return flat


def build_config(flat: dict) -> ExperimentConfig:
    """Turn flat keys into an :class:`ExperimentConfig` over the defaults."""
    cfg = ExperimentConfig()
    env = cfg.env
    env_map = {"options": "n_options", "labels": "n_labels", "features": "n_features",
               "pool_size": "pool_size", "param_scale": "param_scale",
               "pool_mean_scale": "pool_mean_scale", "seed": "seed"}
    env_kw = {env_map[k[4:]]: v for k, v in flat.items() if k.startswith("env.") and k != "env.path"}
    env = replace(env, **env_kw)
    sched_kw = {k[9:]: v for k, v in flat.items() if k.startswith("schedule.")}
    if "labels" in sched_kw:
        labels = sched_kw["labels"]
        if not all(isinstance(v, int) and v >= 1 for v in labels):
            raise ConfigError("schedule.labels must be positive integers (1-based)")
        sched_kw["labels"] = tuple(v - 1 for v in labels)
    schedule = replace(cfg.schedule, **sched_kw)
    hyper = {name: dict(params) for name, params in cfg.hyper.items()}
    for key, value in flat.items():
        if key.startswith("agent."):
            _, name, param = key.split(".")
            hyper.setdefault(name, {})[param] = value
    kw = dict(env=env, schedule=schedule, hyper=hyper, env_path=flat.get("env.path"))
    for key, attr in (("run.horizon", "horizon"), ("run.runs", "runs"), ("run.seed", "seed"),
                      ("run.workers", "workers"), ("run.output", "output"), ("run.regret", "regret_metric"),
                      ("belief.mean", "belief_mean"), ("belief.scale", "belief_scale")):
        if key in flat:
            kw[attr] = flat[key]
    if "run.agents" in flat:
        kw["agents"] = tuple(flat["run.agents"])
    try:
        return replace(cfg, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.runs is not None:
        kw["runs"] = args.runs
    if args.horizon is not None:
        kw["horizon"] = args.horizon
    if args.agents:
        kw["agents"] = tuple(a.strip() for a in args.agents.split(",") if a.strip())
    if args.schedule:
        kw["schedule"] = replace(cfg.schedule, kind=args.schedule)
    if getattr(args, "workers", None) is not None:
        kw["workers"] = args.workers
    if getattr(args, "out", None):
        kw["output"] = args.out
    return replace(cfg, **kw)


def _simulate(cfg: ExperimentConfig, env=None) -> int:
    cfg.validate()
    if cfg.schedule.kind not in ("stationary", "dynamic"):
        raise ConfigError(f"unknown schedule kind {cfg.schedule.kind!r}")
    if not cfg.output:
        raise ConfigError("no output directory: set run.output or pass --out")
    result = run_experiment(cfg, env)
    summary = summarize(result)
    emit_outputs(result, summary, cfg.output)
    for name, s in summary.items():
        print(f"{name:8s} final regret {s['final'].mean():8.3f} +/- {s['final'].std():.3f}")
    print(f"outputs written to {cfg.output}")
    return EXIT_OK


def cmd_generate_env(args) -> int:
    spec = EnvSpec(args.options, args.labels, args.features, args.pool_size, args.param_scale,
                   args.pool_mean_scale, args.seed)
    if min(spec.n_options, spec.n_labels, spec.n_features, spec.pool_size) < 1 or spec.param_scale < 0:
        raise ConfigError("options, labels, features and pool size must be >= 1; param scale >= 0")
    env = generate_environment(spec)
    save_environment(env, args.out)
    print(f"environment with {env.n_options} options, {env.n_labels} labels, "
          f"{env.n_features} features written to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        opts = TrainOptions(args.lr, args.epochs, args.batch_size, args.train_frac, args.seed)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    table = ingest_table(args.table, TableSchema(n_labels=args.labels))
    env, pca, report = train_pipeline(table, args.components, opts, args.pool_size)
    save_environment(env, args.out)
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    save_report(report, pca, report_path)
    print(f"trained {env.n_options} options; mean held-out accuracy {report.accuracy.mean():.3f}")
    print(f"environment written to {args.out}, report to {report_path}")
    if args.simulate:
        cfg = build_config(read_config(args.config)) if args.config else ExperimentConfig()
        cfg = replace(cfg, env_path=args.out, output=args.simulate)
        cfg = _apply_overrides(cfg, argparse.Namespace(seed=None, runs=args.runs, horizon=args.horizon,
                                                       agents=args.agents, schedule=args.schedule))
        return _simulate(cfg, load_environment(args.out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = build_config(read_config(args.config)) if args.config else ExperimentConfig()
    return _simulate(_apply_overrides(cfg, args))


def cmd_report(args) -> int:
    out = Path(args.result_dir)
    summary_path = out / "summary.json"
    traj_path = out / "regret_trajectories.csv"
    if not summary_path.is_file() or not traj_path.is_file():
        raise ConfigError(f"{out} does not look like a simulation output directory")
    doc = json.loads(summary_path.read_text(encoding="utf-8"))
    print(f"{'agent':8s} {'final mean':>12s} {'final std':>10s} {'above':>6s} {'below':>6s}")
    for name, s in doc["agents"].items():
        print(f"{name:8s} {float(s['final_mean']):12.3f} {float(s['final_std']):10.3f} "
              f"{s['above_n']:6d} {s['below_n']:6d}")
    if args.charts:
        _charts(traj_path, out)
    return EXIT_OK


def _charts(traj_path: Path, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict = {}
    with traj_path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t, m, s = series.setdefault(row["agent"], ([], [], []))
            t.append(int(row["t"]))
            m.append(float(row["mean"]))
            s.append(float(row["std"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, (t, m, s) in series.items():
        ax.plot(t, m, label=name)
        ax.fill_between(t, [a - b for a, b in zip(m, s)], [a + b for a, b in zip(m, s)], alpha=0.15)
    ax.set_xlabel("decision instance")
    ax.set_ylabel("cumulative regret")
    ax.legend()
    fig.tight_layout()
    path = out / "regret.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"chart written to {path}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors count as configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aifbandit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-env", help="draw a synthetic environment and save it")
    g.add_argument("--options", type=int, default=9)
    g.add_argument("--labels", type=int, default=14)
    g.add_argument("--features", type=int, default=8)
    g.add_argument("--pool-size", type=int, default=50_000)
    g.add_argument("--param-scale", type=float, default=1.5)
    g.add_argument("--pool-mean-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="environment file to write")
    g.set_defaults(func=cmd_generate_env)

    t = sub.add_parser("train", help="PCA + softmax training on a labelled table")
    t.add_argument("table", help="CSV with header option,feat_1..feat_C,label")
    t.add_argument("--labels", type=int, default=None, help="label count F (default: largest label seen)")
    t.add_argument("--components", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--train-frac", type=float, default=0.8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--pool-size", type=int, default=None)
    t.add_argument("--out", required=True, help="environment file to write")
    t.add_argument("--report", default=None, help="training report (JSON)")
    t.add_argument("--simulate", metavar="DIR", default=None,
                   help="also simulate on the trained environment, writing outputs to DIR")
    t.add_argument("--config", default=None, help="simulation config used with --simulate")
    t.add_argument("--runs", type=int, default=None)
    t.add_argument("--horizon", type=int, default=None)
    t.add_argument("--agents", default=None)
    t.add_argument("--schedule", default=None, choices=("stationary", "dynamic"))
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    s.add_argument("config", nargs="?", default=None, help="config file (flat dotted keys)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--runs", type=int, default=None)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--agents", default=None, help=f"comma-separated subset of {','.join(AGENT_KINDS)}")
    s.add_argument("--schedule", default=None, choices=("stationary", "dynamic"))
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", default=None, help="output directory (overrides run.output)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="summarize a simulation output directory")
    r.add_argument("result_dir")
    r.add_argument("--charts", action="store_true", help="also render regret.png (needs matplotlib)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, LaplaceError, DatasetError, OSError, ImportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
