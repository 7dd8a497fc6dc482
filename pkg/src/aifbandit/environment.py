"""Ground-truth bandit environments, preference schedules and regret."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aifbandit.model import ContractError, PriorPreference, logsumexp

FORMAT_TAG = "aifbandit-environment"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnvSpec:
    n_options: int = 9
    n_labels: int = 14
    n_features: int = 8
    pool_size: int = 50_000
    param_scale: float = 1.5
    pool_mean_scale: float = 1.0
    seed: int = 0


def pool_likelihoods(params_flat, pool, n_labels: int) -> np.ndarray:
    """Softmax likelihood of every label at every context of a pool, ``(n, F)``."""
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    rows = np.asarray(params_flat, dtype=float).reshape(n_labels, pool.shape[1] + 1)
    eta = pool @ rows[:, :-1].T + rows[:, -1]
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


@dataclass(frozen=True)
class Environment:
    """K options, each with true softmax parameters and a pool of contexts.

    ``true_params`` is ``(K, d)`` in the flattened class-major layout and
    ``psi_table[k, f]`` is the pool-averaged probability of label ``f`` at
    option ``k``.
    """

    true_params: np.ndarray
    context_pools: tuple
    n_labels: int
    seed: int = 0
    psi_table: np.ndarray = field(default=None)

    def __post_init__(self):
        params = np.atleast_2d(np.asarray(self.true_params, dtype=float))
        pools = tuple(np.atleast_2d(np.asarray(p, dtype=float)) for p in self.context_pools)
        if len(pools) != params.shape[0]:
            raise ContractError(f"{params.shape[0]} parameter blocks but {len(pools)} context pools")
        c = pools[0].shape[1]
        if params.shape[1] != (c + 1) * self.n_labels:
            raise ContractError(
                f"parameter dimension {params.shape[1]} != (C+1)*F = {(c + 1) * self.n_labels}"
            )
        for k, p in enumerate(pools):
            if p.shape[0] < 1:
                raise ContractError(f"context pool of option {k} is empty")
            if p.shape[1] != c:
                raise ContractError(f"context pool of option {k} has dimension {p.shape[1]}, expected {c}")
        psi = np.array([pool_likelihoods(params[k], pools[k], self.n_labels).mean(axis=0)
                        for k in range(len(pools))])
        object.__setattr__(self, "true_params", params)
        object.__setattr__(self, "context_pools", pools)
        object.__setattr__(self, "psi_table", psi)

    @property
    def n_options(self) -> int:
        return self.true_params.shape[0]

    @property
    def n_features(self) -> int:
        return self.context_pools[0].shape[1]

    @property
    def dim(self) -> int:
        return self.true_params.shape[1]

    def likelihood(self, k: int, x) -> np.ndarray:
        return pool_likelihoods(self.true_params[k], np.asarray(x)[None, :], self.n_labels)[0]

    def best_option(self, f_p: int) -> int:
        return int(np.argmax(self.psi_table[:, f_p]))

    def is_pool_stable(self, f_p: int) -> bool:
        """True when the pool-average best option is also best at every pooled context.

        Only the best option's own pool is visible to it, so the check compares
        each option's likelihood at its own contexts against the best
        option's worst context.
        """
        best = self.best_option(f_p)
        worst_best = pool_likelihoods(self.true_params[best], self.context_pools[best], self.n_labels)[:, f_p].min()
        for k in range(self.n_options):
            if k == best:
                continue
            top = pool_likelihoods(self.true_params[k], self.context_pools[k], self.n_labels)[:, f_p].max()
            if top >= worst_best:
                return False
        return True


def generate_environment(spec: EnvSpec) -> Environment:
    """Random ground truth: normal parameters and option-specific Gaussian context pools."""
    if min(spec.n_options, spec.n_labels, spec.n_features, spec.pool_size) < 1:
        raise ContractError(f"environment dimensions must be >= 1: {spec}")
    if spec.param_scale < 0:
        raise ContractError("param_scale must be non-negative")
    rng = np.random.default_rng(spec.seed)
    d = (spec.n_features + 1) * spec.n_labels
    params = spec.param_scale * rng.standard_normal((spec.n_options, d))
    pools = []
    for _ in range(spec.n_options):
        centre = spec.pool_mean_scale * rng.standard_normal(spec.n_features)
        pools.append(centre + rng.standard_normal((spec.pool_size, spec.n_features)))
    return Environment(params, tuple(pools), spec.n_labels, spec.seed)


def sample_context(env: Environment, k: int, rng: np.random.Generator) -> np.ndarray:
    pool = env.context_pools[k]
    return pool[rng.integers(pool.shape[0])]


def outcome_from_uniform(probs, u: float) -> int:
    """Inverse-CDF categorical draw over the label order."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), cdf.size - 1))


def sample_outcome(env: Environment, k: int, x, rng: np.random.Generator) -> int:
    return outcome_from_uniform(env.likelihood(k, x), rng.random())


def reward(o: int, f_p: int) -> int:
    return int(o == f_p)


def instantaneous_regret(env: Environment, k: int, f_p: int) -> float:
    col = env.psi_table[:, f_p]
    return float(col.max() - col[k])


def contextual_regret(env: Environment, contexts, k: int, f_p: int) -> float:
    """Gap to the best option at the realized contexts rather than pool averages.

    Alternate metric; the oracle scores exactly zero under it.
    """
    probs = np.array([env.likelihood(j, x)[f_p] for j, x in enumerate(contexts)])
    return float(probs.max() - probs[k])


@dataclass(frozen=True)
class PreferenceSchedule:
    """Piecewise-constant preferences; ``segments`` are ``(start, preference, f_p)``."""

    segments: tuple
    horizon: int

    def __post_init__(self):
        segs = tuple(sorted(self.segments, key=lambda s: s[0]))
        if not segs or segs[0][0] != 0:
            raise ContractError("the first preference segment must start at instance 0")
        starts = [s[0] for s in segs]
        if len(set(starts)) != len(starts):
            raise ContractError("preference segments overlap")
        if starts[-1] >= self.horizon:
            raise ContractError(f"segment starting at {starts[-1]} lies beyond horizon {self.horizon}")
        for start, pref, f_p in segs:
            if not 0 <= f_p < pref.n_labels:
                raise ContractError(f"preferred label {f_p} outside 0..{pref.n_labels - 1}")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def stationary(cls, n_labels: int, f_p: int, horizon: int, mass: float = 0.8):
        return cls(((0, PriorPreference.peaked(n_labels, f_p, mass), f_p),), horizon)

    @classmethod
    def cycling(cls, n_labels: int, labels, horizon: int, period: int = 20, mass: float = 0.8):
        """Switch the preferred label every ``period`` instances, cycling through ``labels``."""
        labels = list(labels)
        segs = []
        for i, start in enumerate(range(0, horizon, period)):
            f_p = labels[i % len(labels)]
            segs.append((start, PriorPreference.peaked(n_labels, f_p, mass), f_p))
        return cls(tuple(segs), horizon)

    def segment_index(self, t: int) -> int:
        if not 0 <= t < self.horizon:
            raise ContractError(f"instance {t} outside horizon 0..{self.horizon - 1}")
        idx = 0
        for i, seg in enumerate(self.segments):
            if seg[0] <= t:
                idx = i
        return idx


def active_preference(schedule: PreferenceSchedule, t: int):
    """``(preference, f_p)`` in force at instance ``t``."""
    _, pref, f_p = schedule.segments[schedule.segment_index(t)]
    return pref, f_p


@dataclass
class TrialLog:
    """One agent's trajectory through one run."""

    agent: str
    seed: int
    selected: np.ndarray
    contexts: np.ndarray
    outcomes: np.ndarray
    rewards: np.ndarray
    regrets: np.ndarray
    preferred: np.ndarray
    failures: np.ndarray
    efe: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.selected.size

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.regrets)


# ---------------------------------------------------------------------------
# text serialization


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def save_environment(env: Environment, path) -> None:
    """Write ``env`` as versioned text; floats carry 17 significant digits."""
    lines = [
        f"# {FORMAT_TAG} v{FORMAT_VERSION}",
        f"options {env.n_options}",
        f"labels {env.n_labels}",
        f"features {env.n_features}",
        f"seed {env.seed}",
    ]
    for k in range(env.n_options):
        lines.append(f"params {k}")
        rows = env.true_params[k].reshape(env.n_labels, env.n_features + 1)
        lines.extend(_fmt(r) for r in rows)
    for k, pool in enumerate(env.context_pools):
        lines.append(f"pool {k} {pool.shape[0]}")
        lines.extend(_fmt(r) for r in pool)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_environment(path) -> Environment:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"# {FORMAT_TAG} v"):
        raise ContractError(f"{path}: not an environment file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {version}")
    header = {}
    i = 1
    for key in ("options", "labels", "features", "seed"):
        name, value = lines[i].split()
        if name != key:
            raise ContractError(f"{path}:{i + 1}: expected '{key}', found '{name}'")
        header[key] = int(value)
        i += 1
    k_n, f_n, c_n = header["options"], header["labels"], header["features"]
    params = np.empty((k_n, (c_n + 1) * f_n))
    for k in range(k_n):
        if lines[i].split() != ["params", str(k)]:
            raise ContractError(f"{path}:{i + 1}: expected 'params {k}'")
        block = np.array([[float(v) for v in lines[i + 1 + j].split()] for j in range(f_n)])
        params[k] = block.reshape(-1)
        i += 1 + f_n
    pools = []
    for k in range(k_n):
        tag = lines[i].split()
        if tag[:2] != ["pool", str(k)]:
            raise ContractError(f"{path}:{i + 1}: expected 'pool {k} <rows>'")
        n_rows = int(tag[2])
        pool = np.loadtxt(lines[i + 1:i + 1 + n_rows], ndmin=2) if n_rows else np.empty((0, c_n))
        pools.append(pool.reshape(n_rows, c_n))
        i += 1 + n_rows
    return Environment(params, tuple(pools), f_n, header["seed"])

