"""Monte Carlo experiments over a shared environment and preference schedule.

Randomness is keyed so that agents stay comparable run by run: the context
index drawn for option ``k`` at instance ``t`` of run ``r`` and the uniform
used to sample its outcome depend only on ``(seed, r, t, k)``, and each
agent's private stream depends only on ``(seed, r, agent name)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from aifbandit.agents import AGENT_KINDS, AgentState
from aifbandit.environment import (
    EnvSpec,
    Environment,
    PreferenceSchedule,
    TrialLog,
    active_preference,
    generate_environment,
    instantaneous_regret,
    load_environment,
    pool_likelihoods,
    outcome_from_uniform,
    reward,
)
from aifbandit.laplace import LaplaceError
from aifbandit.model import ContractError

log = logging.getLogger(__name__)

_CONTEXT_STREAM = 1
_OUTCOME_STREAM = 2
_AGENT_STREAM = 3


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class RunAborted(RuntimeError):
    """More than half the instances of a run failed."""


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "stationary"
    labels: tuple = ()
    n_preferred: int = 5
    period: int = 20
    mass: float = 0.8

    def build(self, env: Environment, horizon: int) -> PreferenceSchedule:
        labels = list(self.labels) or ranked_labels(env)
        if self.kind == "stationary":
            return PreferenceSchedule.stationary(env.n_labels, labels[0], horizon, self.mass)
        if self.kind == "dynamic":
            return PreferenceSchedule.cycling(env.n_labels, labels[: self.n_preferred] if not self.labels else labels,
                                              horizon, self.period, self.mass)
        raise ConfigError(f"unknown schedule kind {self.kind!r}")


def ranked_labels(env: Environment) -> list:
    """Labels ordered by the best attainable pool-averaged probability."""
    best = env.psi_table.max(axis=0)
    return [int(f) for f in np.argsort(-best, kind="stable")]


DEFAULT_ROSTER = ("oracle", "egreedy", "softmax", "ucb", "ts", "aif")
REGRET_METRICS = ("pool", "context")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    env_path: str | None = None
    agents: tuple = DEFAULT_ROSTER
    hyper: dict = field(default_factory=lambda: {
        "egreedy": {"epsilon": 0.3},
        "softmax": {"tau": 0.1},
        "ucb": {"c": 0.8},
        "aif": {"gamma": 30.0},
    })
    horizon: int = 100
    runs: int = 100
    seed: int = 0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    belief_mean: float = 0.5
    belief_scale: float = 5.0
    workers: int = 1
    output: str | None = None
    regret_metric: str = "pool"  # "context" scores against the best option at the realized contexts

    def validate(self) -> None:
        if self.horizon < 1 or self.runs < 1:
            raise ConfigError("horizon and runs must be at least 1")
        if not self.agents:
            raise ConfigError("agent roster is empty")
        if len(set(self.agents)) != len(self.agents):
            raise ConfigError("agent roster has duplicates")
        if self.belief_scale <= 0:
            raise ConfigError("belief covariance scale must be positive")
        if self.regret_metric not in REGRET_METRICS:
            raise ConfigError(f"regret metric must be one of {REGRET_METRICS}, got {self.regret_metric!r}")
        for name in self.agents:
            self.make_agent(name)

    def make_agent(self, name: str):
        if name not in AGENT_KINDS:
            raise ConfigError(f"unknown agent {name!r}; choose from {sorted(AGENT_KINDS)}")
        try:
            return AGENT_KINDS[name](**self.hyper.get(name, {}))
        except (TypeError, ContractError) as exc:
            raise ConfigError(f"agent {name}: {exc}") from exc

    def build_environment(self) -> Environment:
        if self.env_path:
            return load_environment(self.env_path)
        return generate_environment(self.env)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agents"] = list(self.agents)
        d["schedule"]["labels"] = list(self.schedule.labels)
        return d


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    env: Environment
    schedule: PreferenceSchedule
    logs: dict  # agent name -> list of TrialLog ordered by run index

    @property
    def agents(self) -> list:
        return list(self.logs)

    def cumulative(self, agent: str) -> np.ndarray:
        """``(runs, T)`` cumulative regret."""
        return np.array([lg.cumulative_regret for lg in self.logs[agent]])

    def final_regrets(self, agent: str) -> np.ndarray:
        return self.cumulative(agent)[:, -1]

    def mean_trajectory(self, agent: str) -> np.ndarray:
        return self.cumulative(agent).mean(axis=0)

    def std_trajectory(self, agent: str) -> np.ndarray:
        return self.cumulative(agent).std(axis=0)


def _agent_key(name: str) -> int:
    return zlib.crc32(name.encode())


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def run_single(env: Environment, schedule: PreferenceSchedule, config: ExperimentConfig, run: int) -> dict:
    """All agents through run ``run``; returns ``{agent: TrialLog}``."""
    horizon = schedule.horizon
    k_n = env.n_options
    ctx_rng = _stream(config.seed, run, _CONTEXT_STREAM)
    sizes = np.array([p.shape[0] for p in env.context_pools])
    ctx_idx = np.floor(ctx_rng.random((horizon, k_n)) * sizes).astype(np.int64)
    uniforms = _stream(config.seed, run, _OUTCOME_STREAM).random((horizon, k_n))
    prefs = [active_preference(schedule, t) for t in range(horizon)]
    if config.regret_metric == "context":
        # contexts are shared by all agents, so the per-instance gaps are too
        probs = np.array([[pool_likelihoods(env.true_params[k], env.context_pools[k][ctx_idx[t, k]][None],
                                            env.n_labels)[0, prefs[t][1]] for k in range(k_n)]
                          for t in range(horizon)])
        gaps = probs.max(axis=1, keepdims=True) - probs
    else:
        gaps = np.array([[instantaneous_regret(env, k, prefs[t][1]) for k in range(k_n)] for t in range(horizon)])

    logs = {}
    for name in config.agents:
        kind = config.make_agent(name)
        rng = _stream(config.seed, run, _AGENT_STREAM, _agent_key(name))
        state = AgentState.initial(k_n, env.n_labels, env.n_features, with_beliefs=kind.uses_beliefs,
                                   mean_fill=config.belief_mean, cov_scale=config.belief_scale)
        selected = np.zeros(horizon, dtype=np.int64)
        outcomes = np.zeros(horizon, dtype=np.int64)
        rewards = np.zeros(horizon, dtype=np.int64)
        regrets = np.zeros(horizon)
        preferred = np.zeros(horizon, dtype=np.int64)
        failures = np.zeros(horizon, dtype=bool)
        used = np.zeros((horizon, env.n_features))
        efe = np.full((horizon, k_n), np.nan) if name == "aif" else None
        for t in range(horizon):
            pref, f_p = prefs[t]
            contexts = [env.context_pools[k][ctx_idx[t, k]] for k in range(k_n)]
            try:
                k, diag = kind.select(state, contexts, pref, f_p, rng, env)
            except (LaplaceError, ContractError) as exc:
                log.warning("run %d, %s, t=%d: selection failed (%s)", run, name, t, exc)
                failures[t] = True
                k, diag = int(rng.integers(k_n)), None
            if efe is not None and diag is not None:
                efe[t] = diag.efe
                failures[t] |= not np.all(np.isfinite(diag.efe))
            x = contexts[k]
            o = outcome_from_uniform(env.likelihood(k, x), uniforms[t, k])
            before = state.failures
            state = kind.update(state, k, o, x, diag)
            failures[t] |= state.failures > before
            selected[t], outcomes[t], preferred[t] = k, o, f_p
            rewards[t] = reward(o, f_p)
            regrets[t] = gaps[t, k]
            used[t] = x
        if failures.sum() > horizon / 2:
            raise RunAborted(f"run {run}, agent {name}: {int(failures.sum())} of {horizon} instances failed")
        logs[name] = TrialLog(name, config.seed, selected, used, outcomes, rewards, regrets,
                              preferred, failures, efe)
    return logs


_WORKER_STATE: dict = {}


def _init_worker(env, schedule, config):
    _WORKER_STATE.update(env=env, schedule=schedule, config=config)


def _worker_run(run: int):
    s = _WORKER_STATE
    return run, run_single(s["env"], s["schedule"], s["config"], run)


def run_experiment(config: ExperimentConfig, env: Environment | None = None) -> ExperimentResult:
    """Run every agent for every Monte Carlo run; results are merged by run index."""
    config.validate()
    env = config.build_environment() if env is None else env
    schedule = config.schedule.build(env, config.horizon)
    per_run = [None] * config.runs
    workers = max(1, min(config.workers, config.runs))
    if workers == 1:
        for r in range(config.runs):
            per_run[r] = run_single(env, schedule, config, r)
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(env, schedule, config)) as pool:
            for r, logs in pool.map(_worker_run, range(config.runs)):
                per_run[r] = logs
    logs = {name: [per_run[r][name] for r in range(config.runs)] for name in config.agents}
    return ExperimentResult(config, env, schedule, logs)


# ---------------------------------------------------------------------------
# summaries


def _group_stats(cum: np.ndarray):
    """Split runs by final regret against the overall mean of final regret."""
    final = cum[:, -1]
    above = final > final.mean()
    out = {}
    for label, mask in (("above", above), ("below", ~above)):
        if mask.any():
            out[label] = (int(mask.sum()), cum[mask].mean(axis=0), cum[mask].std(axis=0))
        else:
            out[label] = (0, np.full(cum.shape[1], np.nan), np.full(cum.shape[1], np.nan))
    return out


def summarize(result: ExperimentResult) -> dict:
    """Regret trajectories, above/below-average groups, transitions and best-option rates."""
    segments = result.schedule.segments
    bounds = [s[0] for s in segments] + [result.schedule.horizon]
    summary = {}
    for name in result.agents:
        cum = result.cumulative(name)
        groups = _group_stats(cum)
        transitions = np.array([lg.selected for lg in result.logs[name]])
        seg_rates = []
        for i, (start, _pref, f_p) in enumerate(segments):
            best = result.env.best_option(f_p)
            seg_rates.append(float(np.mean(transitions[:, start:bounds[i + 1]] == best)))
        summary[name] = {
            "mean": cum.mean(axis=0),
            "std": cum.std(axis=0),
            "final": cum[:, -1],
            "groups": groups,
            "transitions": transitions,
            "best_option_rate": seg_rates,
            "failures": int(sum(lg.failures.sum() for lg in result.logs[name])),
        }
    return summary


def paired_less_pvalue(a, b) -> float:
    """One-sided paired t-test p-value for ``mean(a) < mean(b)``."""
    from scipy import stats

    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if np.all(diff == diff[0]):
        return 0.0 if diff[0] < 0 else 1.0
    return float(stats.ttest_rel(a, b, alternative="less").pvalue)


# ---------------------------------------------------------------------------
# output files


def _g(v) -> str:
    return format(float(v), ".17g")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def emit_outputs(result: ExperimentResult, summary: dict, directory) -> dict:
    """Write trajectory table, summary, transition logs and a hashed manifest."""
    out = Path(directory)
    try:
        (out / "transitions").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = []

    traj = out / "regret_trajectories.csv"
    rows = ["agent,t,mean,std,above_n,above_mean,above_std,below_n,below_mean,below_std"]
    for name, s in summary.items():
        (an, am, asd), (bn, bm, bsd) = s["groups"]["above"], s["groups"]["below"]
        for t in range(s["mean"].size):
            rows.append(",".join([name, str(t + 1), _g(s["mean"][t]), _g(s["std"][t]),
                                  str(an), _g(am[t]), _g(asd[t]), str(bn), _g(bm[t]), _g(bsd[t])]))
    traj.write_text("\n".join(rows) + "\n", encoding="utf-8")
    files.append(traj)

    finals = out / "final_regrets.csv"
    names = list(summary)
    rows = ["run," + ",".join(names)]
    for r in range(result.config.runs):
        rows.append(",".join([str(r)] + [_g(summary[n]["final"][r]) for n in names]))
    finals.write_text("\n".join(rows) + "\n", encoding="utf-8")
    files.append(finals)

    for name in names:
        path = out / "transitions" / f"{name}.csv"
        rows = ["run,t,option,outcome,preferred,reward,regret,failed"]
        for r, lg in enumerate(result.logs[name]):
            for t in range(lg.horizon):
                # options and labels are 1-based on disk
                rows.append(f"{r},{t + 1},{lg.selected[t] + 1},{lg.outcomes[t] + 1},{lg.preferred[t] + 1},"
                            f"{lg.rewards[t]},{_g(lg.regrets[t])},{int(lg.failures[t])}")
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        files.append(path)

    doc = {
        "agents": {
            n: {
                "final_mean": _g(s["final"].mean()),
                "final_std": _g(s["final"].std()),
                "above_n": s["groups"]["above"][0],
                "below_n": s["groups"]["below"][0],
                "best_option_rate_per_segment": [_g(v) for v in s["best_option_rate"]],
                "failed_instances": s["failures"],
            }
            for n, s in summary.items()
        },
        "schedule": [{"start": s[0] + 1, "preferred": s[2] + 1} for s in result.schedule.segments],
        "psi_table": [[_g(v) for v in row] for row in result.env.psi_table],
    }
    summ = out / "summary.json"
    summ.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(summ)

    manifest = {
        "created": datetime.now(timezone.utc).isoformat(),
        "config": result.config.to_dict(),
        "seed": result.config.seed,
        "run_seeds": {"contexts": [result.config.seed, "run", _CONTEXT_STREAM],
                      "outcomes": [result.config.seed, "run", _OUTCOME_STREAM],
                      "agents": {n: [result.config.seed, "run", _AGENT_STREAM, _agent_key(n)] for n in names}},
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_trajectories(path) -> dict:
    """Re-ingest ``regret_trajectories.csv`` as ``{agent: (mean, std)}``."""
    import csv

    data: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            data.setdefault(row["agent"], ([], []))
            data[row["agent"]][0].append(float(row["mean"]))
            data[row["agent"]][1].append(float(row["std"]))
    return {k: (np.array(m), np.array(s)) for k, (m, s) in data.items()}


def default_workers() -> int:
    return os.cpu_count() or 1
