"""Domain types, the 2PL response likelihood and the random-walk prior.

Everything here is a pure function of its inputs and safe to call from any
thread. The logistic link is isolated behind ``irt2pl_prob`` so an alternate
link could be slotted in, but none is provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import log, log_sigmoid, sigmoid

__all__ = [
    "ModelConfig",
    "ItemParams",
    "InteractionRecord",
    "Trajectory",
    "irt2pl_prob",
    "bernoulli_loglik",
    "loglik_from_logit",
    "wiener_logpdf",
    "gauss_logpdf",
    "gauss_kl",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Global hyperparameters: random-walk step std and item prior stds."""

    sigma_theta: float = 0.25
    sigma_a: float = 1.0
    sigma_d: float = 1.0

    def __post_init__(self):
        for name in ("sigma_theta", "sigma_a", "sigma_d"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be a positive finite real, got {v!r}")

    @property
    def lam_theta(self) -> float:
        """Precision of one random-walk step, 1 / sigma_theta^2."""
        return 1.0 / (self.sigma_theta * self.sigma_theta)


@dataclass(frozen=True)
class ItemParams:
    """Discrimination and difficulty of one assessment item."""

    item_id: str
    a: float
    d: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.d)):
            raise ValueError(f"item {self.item_id!r} has non-finite parameters")


@dataclass(frozen=True)
class InteractionRecord:
    """One learner-item attempt.

    ``step`` orders attempts within a learner (strictly increasing, gaps
    allowed). ``kcs`` optionally tags the item with knowledge components.
    """

    learner_id: str
    item_id: str
    correct: int
    step: int
    kcs: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.correct not in (0, 1):
            raise ValueError(f"correct must be 0 or 1, got {self.correct!r}")
        if self.step < 0:
            raise ValueError(f"step must be nonnegative, got {self.step!r}")


@dataclass(frozen=True)
class Trajectory:
    """A learner's ability value at each of their T interaction steps."""

    learner_id: str
    theta: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("theta must be a 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise ValueError("theta must be finite")
        object.__setattr__(self, "theta", arr)

    def __len__(self) -> int:
        return self.theta.shape[0]


def irt2pl_prob(theta, item: ItemParams):
    """P(correct) under 2PL: sigmoid(a * (theta - d)).

    Accepts a scalar or an array of abilities; stable for logits up to
    around +/-700.
    """
    return sigmoid(item.a * (np.asarray(theta, dtype=np.float64) - item.d))


def loglik_from_logit(correct, z):
    """Bernoulli log-likelihood given the response logit z = a(theta - d).

    Stable on both tails: log sigma(z) for a correct response and
    log sigma(-z) otherwise. Works on plain arrays and tape variables.
    """
    return correct * log_sigmoid(z) + (1.0 - correct) * log_sigmoid(-z)


def bernoulli_loglik(correct, theta, item: ItemParams):
    """Log-likelihood of a binary response under 2PL."""
    if correct not in (0, 1):
        raise ValueError(f"correct must be 0 or 1, got {correct!r}")
    z = item.a * (np.asarray(theta, dtype=np.float64) - item.d)
    return loglik_from_logit(float(correct), z)


def gauss_logpdf(x, mean, var):
    """Log-density of N(mean, var) at x. Works on arrays and tape variables."""
    diff = x - mean
    return -0.5 * (_LOG_2PI + log(var) + diff * diff / var)


def gauss_kl(mean_q, var_q, mean_p, var_p):
    """KL(N(mean_q, var_q) || N(mean_p, var_p)), closed form.

    Zero exactly when the two distributions coincide. Works on arrays and
    tape variables.
    """
    diff = mean_q - mean_p
    ratio = var_q / var_p
    return 0.5 * (ratio - log(ratio) - 1.0 + diff * diff / var_p)


def wiener_logpdf(traj: Trajectory, cfg: ModelConfig) -> float:
    """Log-density of a trajectory under the Gaussian random-walk prior.

    theta_0 = 0 by convention; each step contributes
    log N(theta_t; theta_{t-1}, sigma_theta^2).
    """
    theta = traj.theta
    if theta.shape[0] == 0:
        raise ValueError("trajectory must be nonempty")
    prev = np.concatenate([[0.0], theta[:-1]])
    var = cfg.sigma_theta * cfg.sigma_theta
    return float(np.sum(gauss_logpdf(theta, prev, var)))
