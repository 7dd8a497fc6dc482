"""Active-inference option selection for contextual multi-armed bandits."""

from aifbandit.model import (
    ContractError,
    GaussianBelief,
    PriorPreference,
    SoftmaxParams,
    log_likelihood_gradient,
    log_likelihood_hessian,
    softmax_likelihood,
)

__all__ = [
    "ContractError",
    "GaussianBelief",
    "PriorPreference",
    "SoftmaxParams",
    "log_likelihood_gradient",
    "log_likelihood_hessian",
    "softmax_likelihood",
]
