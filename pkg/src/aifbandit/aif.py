"""Expected free energy and the stochastic option-selection policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from aifbandit.laplace import (
    DEFAULT_NEWTON,
    LaplaceError,
    LogitLaplace,
    NewtonOptions,
    project_belief,
    solve_logit_laplace,
)
from aifbandit.model import ContractError, GaussianBelief, PriorPreference, augment, logsumexp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutcomeTerm:
    outcome: int
    predicted_prob: float
    extrinsic: float
    epistemic: float


@dataclass(frozen=True)
class EfeBreakdown:
    """Per-outcome contributions to one option's expected free energy."""

    per_outcome: tuple
    total: float

    @property
    def extrinsic(self) -> float:
        return float(sum(t.extrinsic for t in self.per_outcome))

    @property
    def epistemic(self) -> float:
        return float(sum(t.epistemic for t in self.per_outcome))

    @property
    def predicted(self) -> np.ndarray:
        return np.array([t.predicted_prob for t in self.per_outcome])


@dataclass(frozen=True)
class PolicyDistribution:
    probs: np.ndarray
    gamma: float


EXTRINSIC_FORMS = ("surprise", "divergence")


def efe_terms(predicted, pref_probs, kl, extrinsic: str = "surprise"):
    """Extrinsic and epistemic contribution of every outcome.

    ``extrinsic="surprise"`` scores outcome ``o`` as ``-q_o log p_pr(o)``;
    ``"divergence"`` uses ``q_o log(q_o / p_pr(o))``, i.e. the KL from the
    predicted distribution to the preference, which differs from the former
    by the predicted entropy.  The epistemic part is ``q_o`` times the KL
    between the Laplace posterior for ``o`` and the current belief.
    ``total = sum(extrinsic - epistemic)``.
    """
    if extrinsic not in EXTRINSIC_FORMS:
        raise ContractError(f"extrinsic form must be one of {EXTRINSIC_FORMS}, got {extrinsic!r}")
    q = np.asarray(predicted, dtype=float)
    pref_probs = np.asarray(pref_probs, dtype=float)
    if extrinsic == "surprise":
        extrinsic_o = -q * np.log(pref_probs)
    else:
        ratio = np.log(np.where(q > 0, q, 1.0)) - np.log(pref_probs)
        extrinsic_o = np.where(q > 0, q * ratio, 0.0)
    epistemic = q * np.asarray(kl, dtype=float)
    return extrinsic_o, epistemic


def _breakdown(q, pref: PriorPreference, kl, extrinsic: str = "surprise") -> EfeBreakdown:
    ext, epi = efe_terms(q, pref.probs, kl, extrinsic)
    terms = tuple(
        OutcomeTerm(o, float(q[o]), float(ext[o]), float(epi[o])) for o in range(q.size)
    )
    return EfeBreakdown(terms, float(np.sum(ext - epi)))


def _fit_options(beliefs, contexts, opts: NewtonOptions):
    """Project every option and Laplace-fit all outcomes in one batch."""
    ms, ss, zs = [], [], []
    for b, x in zip(beliefs, contexts):
        m, s = project_belief(b, x)
        ms.append(m)
        ss.append(s)
        zs.append(np.max(np.abs(augment(x))))
    fit = solve_logit_laplace(np.array(ms), np.array(ss), np.array(zs), opts=opts)
    return fit, ss


def expected_free_energy(
    belief: GaussianBelief, x, pref: PriorPreference, opts: NewtonOptions = DEFAULT_NEWTON,
    extrinsic: str = "surprise",
) -> EfeBreakdown:
    """Expected free energy of probing one option at context ``x``."""
    fit, _ = _fit_options([belief], [np.asarray(x, dtype=float)], opts)
    if pref.n_labels != fit.kl.shape[1]:
        raise ContractError(
            f"preference has {pref.n_labels} labels, belief models {fit.kl.shape[1]}"
        )
    bad = np.flatnonzero(~fit.converged[0])
    if bad.size:
        raise LaplaceError("Newton search did not converge", int(bad[0]))
    return _breakdown(fit.predicted()[0], pref, fit.kl[0], extrinsic)


def policy_from_efe(efe_values, gamma: float) -> PolicyDistribution:
    """Softmax of ``-gamma * G`` over options."""
    g = np.asarray(efe_values, dtype=float).reshape(-1)
    if not gamma > 0:
        raise ContractError(f"precision must be positive, got {gamma}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise ContractError(f"expected free energy of option {bad[0]} is not finite")
    a = -gamma * g
    return PolicyDistribution(np.exp(a - logsumexp(a)), float(gamma))


def select_option(policy: PolicyDistribution, rng: np.random.Generator) -> int:
    """Draw an option index by inverting the cumulative distribution."""
    cdf = np.cumsum(policy.probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), cdf.size - 1))


@dataclass
class StepDiagnostics:
    """What :func:`aif_step` computed on the way to its choice."""

    breakdowns: list
    efe: np.ndarray
    policy: PolicyDistribution
    fit: LogitLaplace | None
    logit_covs: list | None


def evaluate_options(beliefs, contexts, pref: PriorPreference, opts: NewtonOptions = DEFAULT_NEWTON,
                     extrinsic: str = "surprise"):
    """EFE breakdown per option; a failed option gets ``None`` and ``+inf``."""
    try:
        fit, ss = _fit_options(beliefs, contexts, opts)
    except LaplaceError:
        fit, ss = None, None
    k = len(beliefs)
    breakdowns: list = [None] * k
    efe = np.full(k, np.inf)
    if fit is not None:
        q = fit.predicted()
        for i in range(k):
            if fit.converged[i].all():
                breakdowns[i] = _breakdown(q[i], pref, fit.kl[i], extrinsic)
                efe[i] = breakdowns[i].total
    else:
        for i in range(k):
            try:
                breakdowns[i] = expected_free_energy(beliefs[i], contexts[i], pref, opts, extrinsic)
                efe[i] = breakdowns[i].total
            except (LaplaceError, ContractError):
                pass
    for i in np.flatnonzero(~np.isfinite(efe)):
        log.warning("EFE evaluation failed for option %d; excluded this step", i)
    return efe, breakdowns, fit, ss


def aif_step(beliefs, contexts, pref: PriorPreference, gamma: float, rng: np.random.Generator,
             opts: NewtonOptions = DEFAULT_NEWTON, extrinsic: str = "surprise"):
    """Score every option, form the policy and sample one option.

    Returns ``(index, diagnostics)``.  Options whose inference failed carry
    ``+inf`` EFE and zero probability; if every option failed the draw is
    uniform.
    """
    if len(beliefs) < 1 or len(beliefs) != len(contexts):
        raise ContractError("need one context per belief and at least one option")
    efe, breakdowns, fit, ss = evaluate_options(beliefs, contexts, pref, opts, extrinsic)
    ok = np.isfinite(efe)
    probs = np.zeros(efe.size)
    if ok.any():
        probs[ok] = policy_from_efe(efe[ok], gamma).probs
    else:
        probs[:] = 1.0 / efe.size
    policy = PolicyDistribution(probs, float(gamma))
    k = select_option(policy, rng)
    return k, StepDiagnostics(breakdowns, efe, policy, fit, ss)
