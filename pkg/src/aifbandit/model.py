"""Softmax observation model and the value types shared by every module.

Parameter layout
----------------
A parameter block for one option holds ``F`` rows of ``C`` weights plus one
bias per row.  Flattened it is class-major with the bias last inside each
class::

    [w_1 (C values), b_1, w_2, b_2, ..., w_F, b_F]      length d = (C+1)*F

so ``flat.reshape(F, C + 1)`` gives one row per outcome label, and the logits
are ``rows @ [x; 1]``.  Options and labels are 0-based everywhere in the API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


def logsumexp(a, axis=None, keepdims=False):
    """Max-subtracted log-sum-exp; finite for logits of any finite magnitude."""
    a = np.asarray(a, dtype=float)
    top = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    return out if keepdims else np.squeeze(out, axis=axis) if axis is not None else out.item()


class ContractError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


def augment(x) -> np.ndarray:
    """Return ``[x; 1]`` so that a bias column can be folded into the weights."""
    x = np.asarray(x, dtype=float)
    return np.append(x, 1.0)


@dataclass(frozen=True)
class SoftmaxParams:
    """Weights ``(F, C)`` and biases ``(F,)`` of one option's softmax model."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.asarray(self.biases, dtype=float).reshape(-1)
        if w.shape[0] != b.shape[0]:
            raise ContractError(
                f"weights have {w.shape[0]} classes but biases have {b.shape[0]}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ContractError("softmax parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def n_labels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return (self.n_features + 1) * self.n_labels

    def flatten(self) -> np.ndarray:
        return np.hstack([self.weights, self.biases[:, None]]).reshape(-1)

    @classmethod
    def from_flat(cls, flat, n_labels: int) -> "SoftmaxParams":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if n_labels < 1 or flat.size % n_labels:
            raise ContractError(
                f"flat vector of length {flat.size} is not divisible into {n_labels} classes"
            )
        rows = flat.reshape(n_labels, -1)
        return cls(rows[:, :-1].copy(), rows[:, -1].copy())

    @classmethod
    def zeros(cls, n_labels: int, n_features: int) -> "SoftmaxParams":
        return cls(np.zeros((n_labels, n_features)), np.zeros(n_labels))


def _rows(theta, n_features: int) -> np.ndarray:
    """Return the ``(F, C+1)`` row view of ``theta``, checking dimensions."""
    if isinstance(theta, SoftmaxParams):
        if theta.n_features != n_features:
            raise ContractError(
                f"parameters expect context dimension {theta.n_features}, "
                f"got context of dimension {n_features}"
            )
        return np.hstack([theta.weights, theta.biases[:, None]])
    flat = np.asarray(theta, dtype=float).reshape(-1)
    if flat.size % (n_features + 1):
        raise ContractError(
            f"parameter dimension {flat.size} is not a multiple of "
            f"context dimension {n_features} + 1"
        )
    return flat.reshape(-1, n_features + 1)


def logits(theta, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    return _rows(theta, x.size) @ augment(x)


def softmax_likelihood(theta, x) -> np.ndarray:
    """Probability of every outcome label given parameters and a context.

    ``theta`` may be a :class:`SoftmaxParams` or a flattened vector.
    """
    eta = logits(theta, x)
    return np.exp(eta - logsumexp(eta))


def log_likelihood_gradient(theta, x, o: int) -> np.ndarray:
    """Gradient of ``log p(o | theta; x)`` with respect to the flattened parameters."""
    x = np.asarray(x, dtype=float).reshape(-1)
    p = softmax_likelihood(theta, x)
    if not 0 <= o < p.size:
        raise ContractError(f"outcome {o} outside 0..{p.size - 1}")
    r = -p
    r[o] += 1.0
    return np.outer(r, augment(x)).reshape(-1)


def log_likelihood_hessian(theta, x) -> np.ndarray:
    """Hessian of the log-likelihood; it does not depend on the observed label."""
    x = np.asarray(x, dtype=float).reshape(-1)
    p = softmax_likelihood(theta, x)
    z = augment(x)
    lam = np.diag(p) - np.outer(p, p)
    return -np.kron(lam, np.outer(z, z))


@dataclass(frozen=True)
class GaussianBelief:
    """Multivariate normal belief over a flattened parameter block.

    The covariance is symmetrized on construction and must admit a Cholesky
    factorization, otherwise :class:`ContractError` is raised.
    """

    mean: np.ndarray
    covariance: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ContractError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ContractError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def isotropic(cls, dim: int, mean_fill: float = 0.5, scale: float = 5.0):
        return cls(np.full(dim, float(mean_fill)), scale * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor of the covariance."""
        return self._chol

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    @cached_property
    def precision(self) -> np.ndarray:
        eye = np.eye(self.dim)
        inv_chol = np.linalg.solve(self._chol, eye)
        prec = inv_chol.T @ inv_chol
        return 0.5 * (prec + prec.T)

    def logpdf(self, theta) -> float:
        diff = np.asarray(theta, dtype=float).reshape(-1) - self.mean
        sol = np.linalg.solve(self._chol, diff)
        return float(-0.5 * (self.dim * np.log(2 * np.pi) + self.logdet + sol @ sol))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self._chol @ rng.standard_normal(self.dim)


@dataclass(frozen=True)
class PriorPreference:
    """Strictly positive distribution over outcome labels that the agent wants to see."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size < 1 or np.any(~np.isfinite(p)) or np.any(p <= 0):
            raise ContractError("preference entries must be finite and strictly positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ContractError(f"preference sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def peaked(cls, n_labels: int, preferred: int, mass: float = 0.8) -> "PriorPreference":
        """Put ``mass`` on ``preferred`` and spread the rest evenly over the other labels."""
        if not 0 <= preferred < n_labels:
            raise ContractError(f"preferred label {preferred} outside 0..{n_labels - 1}")
        if n_labels == 1:
            return cls(np.ones(1))
        p = np.full(n_labels, (1.0 - mass) / (n_labels - 1))
        p[preferred] = mass
        return cls(p)

    @property
    def n_labels(self) -> int:
        return self.probs.size
