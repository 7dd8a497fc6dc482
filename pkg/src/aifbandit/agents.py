"""Option-selection strategies behind one interface.

Every agent kind exposes ``select(state, contexts, pref, f_p, rng, env)``
returning ``(option, diagnostics)`` and ``update(state, k, o, x, diagnostics)``
returning a new :class:`AgentState`.  Count-based agents keep the full
option-by-label outcome table so that a change of preferred label redefines
every empirical rate without discarding history.  All ties go to the lowest
option index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from aifbandit.aif import EXTRINSIC_FORMS, aif_step
from aifbandit.laplace import (
    DEFAULT_NEWTON,
    LaplaceError,
    NewtonOptions,
    laplace_posterior_update,
    posterior_from_fit,
)
from aifbandit.model import ContractError, GaussianBelief, logsumexp, softmax_likelihood

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentState:
    """Beliefs (Bayesian agents only), outcome counts and the instance counter."""

    beliefs: tuple
    counts: np.ndarray
    t: int = 0
    failures: int = 0

    @classmethod
    def initial(cls, n_options: int, n_labels: int, n_features: int = 0, *,
                with_beliefs: bool = False, mean_fill: float = 0.5, cov_scale: float = 5.0):
        beliefs = ()
        if with_beliefs:
            b = GaussianBelief.isotropic((n_features + 1) * n_labels, mean_fill, cov_scale)
            beliefs = (b,) * n_options
        return cls(beliefs, np.zeros((n_options, n_labels), dtype=np.int64))

    @property
    def n_options(self) -> int:
        return self.counts.shape[0]

    @property
    def selections(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def rates(self, f_p: int) -> np.ndarray:
        """Empirical rate of ``f_p`` per option; never-selected options score 0."""
        n = self.selections
        hits = self.counts[:, f_p].astype(float)
        return np.divide(hits, n, out=np.zeros(n.size), where=n > 0)


def epsilon_greedy_select(state: AgentState, f_p: int, epsilon: float, rng: np.random.Generator) -> int:
    if not 0 <= epsilon <= 1:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(state.n_options))
    return int(np.argmax(state.rates(f_p)))


def reward_softmax_probs(state: AgentState, f_p: int, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    a = state.rates(f_p) / tau
    return np.exp(a - logsumexp(a))


def reward_softmax_select(state: AgentState, f_p: int, tau: float, rng: np.random.Generator) -> int:
    cdf = np.cumsum(reward_softmax_probs(state, f_p, tau))
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), cdf.size - 1))


def ucb_scores(state: AgentState, f_p: int, c: float) -> np.ndarray:
    n = state.selections
    t = max(state.t, 1)
    return state.rates(f_p) + c * np.sqrt(np.log(t) / np.maximum(n, 1))


def ucb_select(state: AgentState, f_p: int, c: float) -> int:
    if not c > 0:
        raise ContractError(f"exploration parameter must be positive, got {c}")
    unseen = np.flatnonzero(state.selections == 0)
    if unseen.size:
        return int(unseen[0])
    return int(np.argmax(ucb_scores(state, f_p, c)))


def thompson_select(state: AgentState, contexts, f_p: int, rng: np.random.Generator) -> int:
    """One posterior draw per option; pick the largest sampled ``f_p`` probability."""
    scores = [softmax_likelihood(b.sample(rng), x)[f_p] for b, x in zip(state.beliefs, contexts)]
    return int(np.argmax(scores))


def oracle_select(env, contexts, f_p: int) -> int:
    """Best option under the true parameters at the realized contexts."""
    scores = [env.likelihood(k, x)[f_p] for k, x in enumerate(contexts)]
    return int(np.argmax(scores))


def record_outcome(state: AgentState, k: int, o: int, x, update_belief: bool,
                   opts: NewtonOptions = DEFAULT_NEWTON, posterior: GaussianBelief | None = None) -> AgentState:
    """Count the observation and, for Bayesian agents, update option ``k``'s belief.

    A failed belief update keeps the previous belief and bumps ``failures``.
    """
    if not 0 <= k < state.n_options:
        raise ContractError(f"option {k} outside 0..{state.n_options - 1}")
    if not 0 <= o < state.counts.shape[1]:
        raise ContractError(f"outcome {o} outside 0..{state.counts.shape[1] - 1}")
    counts = state.counts.copy()
    counts[k, o] += 1
    beliefs = state.beliefs
    failures = state.failures
    if update_belief:
        try:
            new = posterior if posterior is not None else laplace_posterior_update(beliefs[k], x, o, opts)
            beliefs = beliefs[:k] + (new,) + beliefs[k + 1:]
        except LaplaceError as exc:
            log.warning("belief update for option %d failed (%s); keeping prior", k, exc)
            failures += 1
    return replace(state, beliefs=beliefs, counts=counts, t=state.t + 1, failures=failures)


# ---------------------------------------------------------------------------
# agent kinds


class _Kind:
    name = "agent"
    uses_beliefs = False

    def update(self, state, k, o, x, diagnostics=None, opts=DEFAULT_NEWTON):
        return record_outcome(state, k, o, x, self.uses_beliefs, opts)


@dataclass(frozen=True)
class EpsilonGreedy(_Kind):
    epsilon: float = 0.3
    name = "egreedy"

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ContractError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    def select(self, state, contexts, pref, f_p, rng, env=None):
        return epsilon_greedy_select(state, f_p, self.epsilon, rng), None


@dataclass(frozen=True)
class RewardSoftmax(_Kind):
    tau: float = 0.1
    name = "softmax"

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")

    def select(self, state, contexts, pref, f_p, rng, env=None):
        return reward_softmax_select(state, f_p, self.tau, rng), None


@dataclass(frozen=True)
class Ucb(_Kind):
    c: float = 0.8
    name = "ucb"

    def __post_init__(self):
        if not self.c > 0:
            raise ContractError(f"exploration parameter must be positive, got {self.c}")

    def select(self, state, contexts, pref, f_p, rng, env=None):
        return ucb_select(state, f_p, self.c), None


@dataclass(frozen=True)
class ThompsonSampling(_Kind):
    name = "ts"
    uses_beliefs = True

    def select(self, state, contexts, pref, f_p, rng, env=None):
        return thompson_select(state, contexts, f_p, rng), None


@dataclass(frozen=True)
class ActiveInference(_Kind):
    gamma: float = 30.0
    extrinsic: str = "surprise"
    name = "aif"
    uses_beliefs = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractError(f"precision must be positive, got {self.gamma}")
        if self.extrinsic not in EXTRINSIC_FORMS:
            raise ContractError(f"extrinsic form must be one of {EXTRINSIC_FORMS}, got {self.extrinsic!r}")

    def select(self, state, contexts, pref, f_p, rng, env=None):
        return aif_step(state.beliefs, contexts, pref, self.gamma, rng, extrinsic=self.extrinsic)

    def update(self, state, k, o, x, diagnostics=None, opts=DEFAULT_NEWTON):
        posterior = None
        fit = getattr(diagnostics, "fit", None)
        # the fit for the observed label was already computed while scoring
        if fit is not None and fit.converged[k, o]:
            try:
                posterior = posterior_from_fit(state.beliefs[k], x, fit, k, o, diagnostics.logit_covs[k])
            except LaplaceError:
                posterior = None
        return record_outcome(state, k, o, x, True, opts, posterior)


@dataclass(frozen=True)
class Oracle(_Kind):
    name = "oracle"

    def select(self, state, contexts, pref, f_p, rng, env=None):
        if env is None:
            raise ContractError("the oracle needs the ground-truth environment")
        return oracle_select(env, contexts, f_p), None


AGENT_KINDS = {
    "oracle": Oracle,
    "egreedy": EpsilonGreedy,
    "softmax": RewardSoftmax,
    "ucb": Ucb,
    "ts": ThompsonSampling,
    "aif": ActiveInference,
}
