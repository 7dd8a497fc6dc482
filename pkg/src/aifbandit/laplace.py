"""Laplace approximation for a Gaussian prior times one softmax observation.

For a belief ``N(mu, Sigma)`` over the flattened parameters and a single
observation ``o`` at context ``x`` the joint ``g(theta) = N(theta; mu, Sigma)
p(o | theta; x)`` is approximated by a Gaussian around its mode.  The mode,
the log normalizer of ``g`` (an estimate of ``log q(o)``) and the KL between
the Laplace posterior and the prior are all needed once per outcome label
when scoring an option.

Two routes compute the same quantities:

* :func:`find_map` / :func:`laplace_log_normalizer` work in the full
  ``d``-dimensional parameter space with damped Newton steps.
* :func:`solve_logit_laplace` exploits that the likelihood only sees the
  ``F`` logits ``eta = B theta`` (``B = I_F kron [x; 1]^T``).  Starting from
  the prior mean, Newton iterates stay on ``mu + Sigma B^T v`` and the
  ``d``-dimensional step reduces to ``(S + S Lam S) dv = S (r - v)`` with
  ``S = B Sigma B^T``.  Determinants and traces follow from the matrix
  determinant lemma, so every per-outcome fit costs ``O(F^3)``.

The agents use the second route; tests hold it to the first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from aifbandit._kernels import fit_systems
from aifbandit.model import (
    ContractError,
    GaussianBelief,
    augment,
    log_likelihood_gradient,
    log_likelihood_hessian,
    logsumexp,
    softmax_likelihood,
)

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


class LaplaceError(RuntimeError):
    """Newton search or factorization failed for a particular outcome."""

    def __init__(self, message: str, outcome: int | None = None):
        super().__init__(message if outcome is None else f"outcome {outcome}: {message}")
        self.outcome = outcome


@dataclass(frozen=True)
class NewtonOptions:
    max_iter: int = 100
    grad_tol: float = 1e-8
    max_halvings: int = 30
    boost_start: float = 1e-6
    boost_factor: float = 10.0
    max_boosts: int = 16
    # below this Newton decrement (relative to |log g|) objective differences
    # are rounding noise: take one undamped step and stop
    decrement_tol: float = 1e-12


DEFAULT_NEWTON = NewtonOptions()


@dataclass(frozen=True)
class LaplaceResult:
    """Mode of ``g`` and the Gaussian fitted around it.

    ``precision`` is ``Sigma^-1 - H_lik(theta_map)``; it is built on first
    access because the agents rarely need the dense ``d x d`` matrix.
    """

    theta_map: np.ndarray
    log_evidence: float
    converged: bool
    iterations: int
    outcome: int
    prior: GaussianBelief = field(repr=False, compare=False)
    context: np.ndarray = field(repr=False, compare=False)
    # U = Sigma B^T and G = (I + Lam S)^-1 Lam give the posterior covariance
    # Sigma - U G U^T without inverting a d x d matrix.
    _factors: tuple | None = field(default=None, repr=False, compare=False)

    @cached_property
    def precision(self) -> np.ndarray:
        hess = log_likelihood_hessian(self.theta_map, self.context)
        prec = self.prior.precision - hess
        return 0.5 * (prec + prec.T)

    @cached_property
    def covariance(self) -> np.ndarray:
        if self._factors is not None:
            u, g = self._factors
            cov = self.prior.covariance - u @ g @ u.T
        else:
            chol = _cholesky(self.precision, self.outcome)
            inv = np.linalg.solve(chol, np.eye(chol.shape[0]))
            cov = inv.T @ inv
        return 0.5 * (cov + cov.T)

    def posterior(self) -> GaussianBelief:
        return GaussianBelief(self.theta_map, self.covariance)


def _cholesky(mat: np.ndarray, outcome: int | None = None) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise LaplaceError("matrix is not positive definite", outcome) from exc


def _boosted_solve(mat, rhs, opts: NewtonOptions, outcome=None) -> np.ndarray:
    """Solve ``mat @ x = rhs`` by Cholesky, adding ``lambda * I`` until it factors."""
    lam = 0.0
    eye = np.eye(mat.shape[0])
    for attempt in range(opts.max_boosts + 1):
        try:
            chol = np.linalg.cholesky(mat + lam * eye)
        except np.linalg.LinAlgError:
            lam = opts.boost_start if attempt == 0 else lam * opts.boost_factor
            continue
        if lam:
            log.debug("Newton system needed diagonal boost %g", lam)
        return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    raise LaplaceError("Newton system not positive definite after boosting", outcome)


def _log_joint(theta, belief: GaussianBelief, x, o: int) -> float:
    """``log g(theta)`` including the prior's normalization constant."""
    p = softmax_likelihood(theta, x)
    return belief.logpdf(theta) + float(np.log(p[o]))


def find_map(belief: GaussianBelief, x, o: int, opts: NewtonOptions = DEFAULT_NEWTON) -> LaplaceResult:
    """Maximize ``log g`` over the full parameter vector by damped Newton steps.

    Non-convergence is reported through ``converged=False``; the caller decides
    what to do with it.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if belief.dim % (x.size + 1):
        raise ContractError(
            f"belief dimension {belief.dim} does not fit context dimension {x.size}"
        )
    n_labels = belief.dim // (x.size + 1)
    if not 0 <= o < n_labels:
        raise ContractError(f"outcome {o} outside 0..{n_labels - 1}")

    prec = belief.precision
    mu = belief.mean

    def objective(th):
        diff = th - mu
        return -0.5 * diff @ prec @ diff + float(np.log(softmax_likelihood(th, x)[o]))

    theta = mu.copy()
    f0 = objective(theta)
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        grad = log_likelihood_gradient(theta, x, o) - prec @ (theta - mu)
        if np.max(np.abs(grad)) < opts.grad_tol:
            converged = True
            it -= 1
            break
        system = prec - log_likelihood_hessian(theta, x)
        delta = _boosted_solve(0.5 * (system + system.T), grad, opts, o)
        decrement = float(grad @ delta)
        floor = opts.decrement_tol * max(1.0, abs(f0))
        if decrement <= floor:
            # too close for the line search to resolve; finish with a plain Newton step
            theta = theta + delta
            converged = True
            break
        step = 1.0
        for _ in range(opts.max_halvings + 1):
            cand = theta + step * delta
            f1 = objective(cand)
            if f1 > f0:
                break
            step *= 0.5
        else:
            break
        assert f1 >= f0
        theta, f0 = cand, f1

    result = LaplaceResult(theta, np.nan, converged, it, o, belief, x)
    if converged:
        result = LaplaceResult(
            theta, laplace_log_normalizer(result, belief, x, o), True, it, o, belief, x
        )
    return result


def laplace_log_normalizer(result: LaplaceResult, belief: GaussianBelief, x, o: int) -> float:
    """``log g(theta_map) + d/2 log 2pi - 1/2 log|A|``, an estimate of ``log q(o)``."""
    if not result.converged:
        raise LaplaceError("Laplace fit did not converge", o)
    chol = _cholesky(result.precision, o)
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return _log_joint(result.theta_map, belief, x, o) + 0.5 * belief.dim * LOG_2PI - 0.5 * logdet_a


def gaussian_kl(q_post: GaussianBelief, q_prior: GaussianBelief) -> float:
    """Closed-form ``KL(q_post || q_prior)`` between two Gaussians."""
    if q_post.dim != q_prior.dim:
        raise ContractError(f"dimension mismatch: {q_post.dim} vs {q_prior.dim}")
    l1 = q_prior.cholesky
    x = np.linalg.solve(l1, q_post.cholesky)
    y = np.linalg.solve(l1, q_prior.mean - q_post.mean)
    kl = 0.5 * (np.sum(x * x) + y @ y - q_post.dim + q_prior.logdet - q_post.logdet)
    return float(kl)


# ---------------------------------------------------------------------------
# logit-space route


def project_belief(belief: GaussianBelief, x):
    """Return ``(m, S)``: the prior mean and covariance of the logits at ``x``."""
    z = augment(np.asarray(x, dtype=float).reshape(-1))
    c1 = z.size
    n_labels = belief.dim // c1
    m = belief.mean.reshape(n_labels, c1) @ z
    s = np.einsum("i,figj,j->fg", z, belief.covariance.reshape(n_labels, c1, n_labels, c1), z)
    return m, 0.5 * (s + s.T)


def cross_covariance(belief: GaussianBelief, x) -> np.ndarray:
    """``U = Sigma B^T``, the covariance between parameters and logits."""
    z = augment(np.asarray(x, dtype=float).reshape(-1))
    d = belief.dim
    return belief.covariance.reshape(d, d // z.size, z.size) @ z


@dataclass
class LogitLaplace:
    """Batched per-outcome Laplace fits in logit coordinates.

    Every array has a leading batch shape ``(N, F)``: ``N`` (option, context)
    pairs times the ``F`` hypothetical outcomes.
    """

    v: np.ndarray
    probs: np.ndarray
    log_evidence: np.ndarray
    kl: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray

    def predicted(self) -> np.ndarray:
        """Renormalized predicted observation distribution, shape ``(N, F)``."""
        le = self.log_evidence
        return np.exp(le - logsumexp(le, axis=-1, keepdims=True))


def _lam(p):
    return p[..., :, None] * np.eye(p.shape[-1]) - p[..., :, None] * p[..., None, :]


def solve_logit_laplace(m, s, z_absmax, outcomes=None, opts: NewtonOptions = DEFAULT_NEWTON) -> LogitLaplace:
    """Laplace-fit every outcome label for a batch of projected beliefs.

    Parameters
    ----------
    m : (N, F) array
        Prior logit means.
    s : (N, F, F) array
        Prior logit covariances, positive definite.
    z_absmax : (N,) array
        ``max |[x; 1]|`` per row; converts the logit residual into the infinity
        norm of the full-parameter gradient so the stopping rule matches
        :func:`find_map`.
    outcomes : sequence of int, optional
        Restrict to these labels (same for every row); default all ``F``.

    Notes
    -----
    The Newton direction solves ``(S + S Lam S) dv = S (r - v)``, which is the
    full-space step ``(Sigma^-1 - H) dtheta = grad`` written in logit
    coordinates.  Along a direction the logits move linearly, so every
    halving trial costs one log-sum-exp.  The per-row loops live in
    :mod:`aifbandit._kernels`.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    n, f = m.shape
    s = np.asarray(s, dtype=float).reshape(n, f, f)
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    outs = np.arange(f) if outcomes is None else np.asarray(outcomes, dtype=np.int64)
    if outs.size and (outs.min() < 0 or outs.max() >= f):
        raise ContractError(f"outcomes must lie in 0..{f - 1}")
    n_o = outs.size
    mb = np.ascontiguousarray(np.repeat(m, n_o, axis=0))
    sb = np.ascontiguousarray(np.repeat(s, n_o, axis=0))
    ob = np.tile(outs, n).astype(np.int64)
    zb = np.repeat(np.broadcast_to(np.asarray(z_absmax, dtype=float), (n,)), n_o)
    v, p, le, kl, conv, iters, status = fit_systems(
        mb, sb, ob, np.ascontiguousarray(zb), opts.max_iter, opts.grad_tol, opts.max_halvings,
        opts.boost_start, opts.boost_factor, opts.max_boosts, opts.decrement_tol,
    )
    if status.any():
        raise LaplaceError("logit covariance is not positive definite", int(ob[np.argmax(status)]))
    shape = (n, n_o)
    return LogitLaplace(
        v=v.reshape(n, n_o, f),
        probs=p.reshape(n, n_o, f),
        log_evidence=le.reshape(shape),
        kl=kl.reshape(shape),
        converged=conv.reshape(shape),
        iterations=iters.reshape(shape),
    )


def _posterior_factors(belief, x, v, p, s):
    """``(theta_map, U, G)`` for one outcome's fit."""
    u = cross_covariance(belief, x)
    lam = _lam(p)
    system = s + s @ lam @ s
    g = np.linalg.solve(0.5 * (system + system.T), s @ lam)
    return belief.mean + u @ v, u, 0.5 * (g + g.T)


def _result_from_logit(belief, x, fit: LogitLaplace, row: int, col: int, o: int, s) -> LaplaceResult:
    theta, u, g = _posterior_factors(belief, x, fit.v[row, col], fit.probs[row, col], s)
    return LaplaceResult(
        theta_map=theta,
        log_evidence=float(fit.log_evidence[row, col]),
        converged=bool(fit.converged[row, col]),
        iterations=int(fit.iterations[row, col]),
        outcome=o,
        prior=belief,
        context=np.asarray(x, dtype=float).reshape(-1),
        _factors=(u, g),
    )


def predicted_observation(belief: GaussianBelief, x, opts: NewtonOptions = DEFAULT_NEWTON):
    """Predicted outcome distribution under ``belief`` at context ``x``.

    Returns the renormalized distribution and one :class:`LaplaceResult` per
    outcome label for reuse by the expected free energy.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    m, s = project_belief(belief, x)
    fit = solve_logit_laplace(m[None], s[None], np.max(np.abs(augment(x)))[None], opts=opts)
    bad = np.flatnonzero(~fit.converged[0])
    if bad.size:
        raise LaplaceError("Newton search did not converge", int(bad[0]))
    results = [_result_from_logit(belief, x, fit, 0, o, o, s) for o in range(m.size)]
    return fit.predicted()[0], results


def laplace_posterior_update(belief: GaussianBelief, x, o: int, opts: NewtonOptions = DEFAULT_NEWTON) -> GaussianBelief:
    """Condition ``belief`` on observing label ``o`` at context ``x``.

    Raises :class:`LaplaceError` when the fit fails; callers keep the old belief.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    m, s = project_belief(belief, x)
    if not 0 <= o < m.size:
        raise ContractError(f"outcome {o} outside 0..{m.size - 1}")
    fit = solve_logit_laplace(m[None], s[None], np.max(np.abs(augment(x)))[None], outcomes=[o], opts=opts)
    if not fit.converged[0, 0]:
        raise LaplaceError("Newton search did not converge", o)
    return posterior_from_fit(belief, x, fit, 0, 0, s)


def posterior_from_fit(belief, x, fit: LogitLaplace, row: int, col: int, s) -> GaussianBelief:
    theta, u, g = _posterior_factors(belief, x, fit.v[row, col], fit.probs[row, col], s)
    cov = belief.covariance - u @ g @ u.T
    try:
        return GaussianBelief(theta, cov)
    except ContractError as exc:
        raise LaplaceError("posterior covariance lost positive definiteness") from exc
