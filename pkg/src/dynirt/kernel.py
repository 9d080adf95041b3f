"""Gaussian ability-potential aggregation over a random-walk prior.

A trajectory posterior is the random-walk prior times one Gaussian potential
N(mu_t, sigma_t^2) per step. That product is again a linear Gaussian chain:
a single backward sweep turns the potentials into aggregates (rho_t, tau_t),
after which each conditional is

    theta_t | theta_{t-1} ~ N((1 - rho_t) theta_{t-1} + rho_t tau_t,
                              sigma_theta^2 (1 - rho_t)).

``dense_oracle`` builds the same posterior the slow way, as a dense
multivariate normal from the tridiagonal precision matrix, and is the
ground truth the recursions are tested against.

The recursion helpers (``backward_recursion``, ``conditional_params``,
``step_kl_terms``) accept per-step scalars, batch arrays, or tape variables,
so training differentiates through exactly the code verified against the
oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import log1p, sqrt, where
from .model import ModelConfig, Trajectory, gauss_logpdf

__all__ = [
    "AbilityPotential",
    "BackwardAggregate",
    "LgmPosterior",
    "vacuous_potential",
    "backward_pass",
    "make_posterior",
    "step_conditional",
    "rollout_marginals",
    "sample_trajectory",
    "lgm_logpdf",
    "step_kl",
    "dense_oracle",
    "backward_recursion",
    "conditional_params",
    "step_kl_terms",
]

DENSE_ORACLE_MAX_T = 64


@dataclass(frozen=True)
class AbilityPotential:
    """A local Gaussian belief N(mu, sigma^2) about ability at one step.

    ``sigma = inf`` is the vacuous potential: zero precision, no evidence.
    """

    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0.0):
            raise ValueError(f"sigma must be positive (or inf), got {self.sigma!r}")
        if math.isinf(self.sigma):
            return
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)):
            raise ValueError("potential parameters must be finite (sigma may be inf)")

    @property
    def lam(self) -> float:
        """Precision 1 / sigma^2; zero for the vacuous potential."""
        if math.isinf(self.sigma):
            return 0.0
        return 1.0 / (self.sigma * self.sigma)


def vacuous_potential() -> AbilityPotential:
    """The no-evidence potential (infinite sigma, zero precision)."""
    return AbilityPotential(mu=0.0, sigma=math.inf)


@dataclass(frozen=True)
class BackwardAggregate:
    """Backward-aggregated potential weights rho_t and means tau_t, t=1..T."""

    rho: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        tau = np.asarray(self.tau, dtype=np.float64)
        if rho.shape != tau.shape or rho.ndim != 1:
            raise ValueError("rho and tau must be 1-D and the same length")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "tau", tau)


@dataclass(frozen=True)
class LgmPosterior:
    """The variational trajectory posterior: potentials plus their aggregates."""

    cfg: ModelConfig
    potentials: tuple[AbilityPotential, ...]
    agg: BackwardAggregate

    def __post_init__(self):
        if len(self.potentials) != self.agg.rho.shape[0]:
            raise ValueError("potentials and aggregates disagree on length")

    @property
    def T(self) -> int:
        return len(self.potentials)


# ---------------------------------------------------------------------------
# recursion cores (engine-generic: per-step scalars, arrays or tape Vars)
# ---------------------------------------------------------------------------

def backward_recursion(mus, lams, lam_theta):
    """Backward sweep t = T..1 producing lists (rhos, taus).

        rho_t = (lam_t + rho_{t+1} lam_theta) / (lam_theta + lam_t + rho_{t+1} lam_theta)
        tau_t = (lam_t mu_t + rho_{t+1} lam_theta tau_{t+1}) / (lam_t + rho_{t+1} lam_theta)

    with rho_{T+1} = tau_{T+1} = 0 and tau_t defined as 0 when its
    denominator is exactly zero (an all-vacuous suffix), in which case it
    only ever gets multiplied by rho_t = 0.
    """
    T = len(mus)
    rhos = [None] * T
    taus = [None] * T
    rho_next = 0.0
    tau_next = 0.0
    for t in range(T - 1, -1, -1):
        carried = rho_next * lam_theta  # effective precision from the future
        den = lams[t] + carried
        rho = den / (lam_theta + den)
        # divide by a safe denominator first so no 0/0 reaches the tape
        pos = den > 0.0
        tau = where(pos, (lams[t] * mus[t] + carried * tau_next) / where(pos, den, 1.0), 0.0)
        rhos[t] = rho
        taus[t] = tau
        rho_next, tau_next = rho, tau
    return rhos, taus


def conditional_params(theta_prev, rho_t, tau_t, sigma_theta):
    """(mu_tilde, sigma_tilde) of theta_t given theta_{t-1}."""
    mu = (1.0 - rho_t) * theta_prev + rho_t * tau_t
    sigma = sigma_theta * sqrt(1.0 - rho_t)
    return mu, sigma


def step_kl_terms(theta_prev, rho_t, tau_t, sigma_theta):
    """KL(q(theta_t | theta_{t-1}) || prior step N(theta_{t-1}, sigma_theta^2)).

    Simplifies to -log(1-rho)/2 + (1-rho)/2 + rho^2 (tau - theta_prev)^2 /
    (2 sigma_theta^2) - 1/2; exactly zero for a vacuous step (rho = 0).
    """
    diff = rho_t * (tau_t - theta_prev)
    return (
        -0.5 * log1p(-rho_t)
        + 0.5 * (1.0 - rho_t)
        + diff * diff / (2.0 * sigma_theta * sigma_theta)
        - 0.5
    )


# ---------------------------------------------------------------------------
# typed single-trajectory API
# ---------------------------------------------------------------------------

def _potential_arrays(potentials) -> tuple[np.ndarray, np.ndarray]:
    mus = np.array([p.mu for p in potentials], dtype=np.float64)
    lams = np.array([p.lam for p in potentials], dtype=np.float64)
    return mus, lams


def backward_pass(potentials, cfg: ModelConfig) -> BackwardAggregate:
    """Aggregate potentials backwards into (rho_t, tau_t), t = 1..T."""
    if len(potentials) == 0:
        raise ValueError("need at least one potential")
    mus, lams = _potential_arrays(potentials)
    rhos, taus = backward_recursion(list(mus), list(lams), cfg.lam_theta)
    return BackwardAggregate(rho=np.array(rhos), tau=np.array(taus))


def make_posterior(potentials, cfg: ModelConfig) -> LgmPosterior:
    """Convenience constructor running the backward pass."""
    pots = tuple(potentials)
    return LgmPosterior(cfg=cfg, potentials=pots, agg=backward_pass(pots, cfg))


def _check_index(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise IndexError(f"step index {t} out of range 1..{T}")


def step_conditional(theta_prev: float, t: int, post: LgmPosterior) -> tuple[float, float]:
    """Mean and std of theta_t given theta_{t-1}; t is 1-based, theta_0 = 0."""
    _check_index(t, post.T)
    rho = post.agg.rho[t - 1]
    tau = post.agg.tau[t - 1]
    mu, sigma = conditional_params(float(theta_prev), rho, tau, post.cfg.sigma_theta)
    return float(mu), float(sigma)


def rollout_marginals(post: LgmPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-step marginal means and variances of the posterior chain.

    m_t = (1-rho_t) m_{t-1} + rho_t tau_t,
    v_t = (1-rho_t)^2 v_{t-1} + sigma_theta^2 (1-rho_t), from m_0 = v_0 = 0.
    """
    rho, tau = post.agg.rho, post.agg.tau
    var_theta = post.cfg.sigma_theta ** 2
    means = np.empty(post.T)
    variances = np.empty(post.T)
    m, v = 0.0, 0.0
    for t in range(post.T):
        keep = 1.0 - rho[t]
        m = keep * m + rho[t] * tau[t]
        v = keep * keep * v + var_theta * keep
        means[t] = m
        variances[t] = v
    return means, variances


def sample_trajectory(post: LgmPosterior, noise, learner_id: str = "") -> Trajectory:
    """Draw a trajectory by the reparameterized rollout theta_t = mu_t + sigma_t eps_t."""
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != (post.T,):
        raise ValueError(f"noise must have shape ({post.T},)")
    sigma_theta = post.cfg.sigma_theta
    theta = np.empty(post.T)
    prev = 0.0
    for t in range(post.T):
        mu, sigma = conditional_params(prev, post.agg.rho[t], post.agg.tau[t], sigma_theta)
        prev = mu + sigma * eps[t]
        theta[t] = prev
    return Trajectory(learner_id=learner_id, theta=theta)


def lgm_logpdf(traj: Trajectory, post: LgmPosterior) -> float:
    """Log-density of a trajectory under the posterior chain."""
    theta = traj.theta
    if theta.shape[0] != post.T:
        raise ValueError("trajectory length does not match the posterior")
    prev = np.concatenate([[0.0], theta[:-1]])
    mu, sigma = conditional_params(prev, post.agg.rho, post.agg.tau, post.cfg.sigma_theta)
    return float(np.sum(gauss_logpdf(theta, mu, sigma * sigma)))


def step_kl(theta_prev: float, t: int, post: LgmPosterior, cfg: ModelConfig) -> float:
    """KL of the step-t posterior conditional from the prior step, >= 0."""
    _check_index(t, post.T)
    rho = post.agg.rho[t - 1]
    tau = post.agg.tau[t - 1]
    return float(step_kl_terms(float(theta_prev), rho, tau, cfg.sigma_theta))


def dense_oracle(potentials, cfg: ModelConfig,
                 max_t: int = DENSE_ORACLE_MAX_T) -> tuple[np.ndarray, np.ndarray]:
    """Joint posterior (mean vector, covariance matrix) by direct solve.

    Assembles the tridiagonal precision of prior-times-potentials,

        Lambda_tt = lam_theta (1 + [t < T]) + lam_t,
        Lambda_{t,t+1} = -lam_theta,

    with information vector h_t = lam_t mu_t, and inverts it densely.
    Intended as a brute-force reference for small T.
    """
    T = len(potentials)
    if T == 0:
        raise ValueError("need at least one potential")
    if T > max_t:
        raise ValueError(f"dense oracle limited to T <= {max_t}, got {T}")
    mus, lams = _potential_arrays(potentials)
    lam_theta = cfg.lam_theta
    prec = np.zeros((T, T))
    diag = lam_theta + lams
    diag[: T - 1] += lam_theta  # interior steps carry both adjacent walk terms
    prec[np.arange(T), np.arange(T)] = diag
    off = np.arange(T - 1)
    prec[off, off + 1] = -lam_theta
    prec[off + 1, off] = -lam_theta
    info = lams * mus
    cov = np.linalg.inv(prec)
    mean = cov @ info
    return mean, cov
