"""Recognition networks and per-item Gaussian variational posteriors.

The potential network maps one interaction, encoded as the raw triple
(a, d, correct), to a Gaussian ability potential (mu, log sigma^2) through a
single 16-unit GELU hidden layer. The same architecture with a 3-channel
head drives the direct transition variant. Item posteriors are independent
Gaussians over each item's discrimination and difficulty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import clip, gelu
from .kernel import AbilityPotential
from .model import ModelConfig, gauss_kl

__all__ = [
    "HIDDEN_WIDTH",
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "UnknownItemError",
    "PotentialNet",
    "ItemPosterior",
    "init_net_params",
    "init_item_params",
    "net_forward",
    "potential_forward",
    "item_sample",
    "item_kl",
    "potential_grid",
]

HIDDEN_WIDTH = 16
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

# parameter-store key layout shared by training and checkpoints
NET_KEYS = ("net.w1", "net.b1", "net.w2", "net.b2")
ITEM_KEYS = ("items.mu_a", "items.logvar_a", "items.mu_d", "items.logvar_d")


class UnknownItemError(KeyError):
    """An item id that is not in the posterior vocabulary."""


def init_net_params(rng: np.random.Generator, out_dim: int = 2,
                    head_bias=None) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform hidden layer; zero head so training starts
    from potentials that barely move the prior."""
    bound = 1.0 / np.sqrt(3.0)
    params = {
        "net.w1": rng.uniform(-bound, bound, size=(3, HIDDEN_WIDTH)),
        "net.b1": rng.uniform(-bound, bound, size=HIDDEN_WIDTH),
        "net.w2": np.zeros((HIDDEN_WIDTH, out_dim)),
        "net.b2": np.zeros(out_dim),
    }
    if head_bias is not None:
        params["net.b2"] = np.array(head_bias, dtype=np.float64)
    return params


def init_item_params(n_items: int) -> dict[str, np.ndarray]:
    """Prior means with moderate initial confidence (logvar -2)."""
    return {
        "items.mu_a": np.ones(n_items),
        "items.logvar_a": np.full(n_items, -2.0),
        "items.mu_d": np.zeros(n_items),
        "items.logvar_d": np.full(n_items, -2.0),
    }


def net_forward(params, x):
    """Two affine layers with GELU in between; engine-generic.

    ``params`` maps the NET_KEYS to arrays or tape variables; ``x`` has
    shape (n, 3). Returns the raw head output of shape (n, out_dim); heads
    are interpreted by the caller (and log-variances clamped there).
    """
    h = gelu(x @ params["net.w1"] + params["net.b1"])
    return h @ params["net.w2"] + params["net.b2"]


@dataclass(frozen=True)
class PotentialNet:
    """Plain-array view of the potential network weights."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator) -> "PotentialNet":
        p = init_net_params(rng, out_dim=2)
        return cls(w1=p["net.w1"], b1=p["net.b1"], w2=p["net.w2"], b2=p["net.b2"])

    @classmethod
    def from_params(cls, params) -> "PotentialNet":
        return cls(w1=np.asarray(params["net.w1"]), b1=np.asarray(params["net.b1"]),
                   w2=np.asarray(params["net.w2"]), b2=np.asarray(params["net.b2"]))

    def as_params(self) -> dict[str, np.ndarray]:
        return {"net.w1": self.w1, "net.b1": self.b1,
                "net.w2": self.w2, "net.b2": self.b2}

    def forward(self, x: np.ndarray) -> np.ndarray:
        return net_forward(self.as_params(), np.asarray(x, dtype=np.float64))


def potential_forward(item_sample: tuple[float, float], correct: int,
                      net: PotentialNet) -> AbilityPotential:
    """One interaction -> one Gaussian ability potential."""
    a, d = item_sample
    out = net.forward(np.array([[a, d, float(correct)]]))
    mu = float(out[0, 0])
    logvar = float(np.clip(out[0, 1], LOGVAR_MIN, LOGVAR_MAX))
    return AbilityPotential(mu=mu, sigma=float(np.exp(0.5 * logvar)))


@dataclass(frozen=True)
class ItemPosterior:
    """Per-item Gaussian factors over discrimination and difficulty."""

    item_ids: tuple[str, ...]
    mu_a: np.ndarray
    logvar_a: np.ndarray
    mu_d: np.ndarray
    logvar_d: np.ndarray

    def __post_init__(self):
        n = len(self.item_ids)
        for name in ("mu_a", "logvar_a", "mu_d", "logvar_d"):
            if np.asarray(getattr(self, name)).shape != (n,):
                raise ValueError(f"{name} must have one entry per item")
        object.__setattr__(self, "_index",
                           {q: i for i, q in enumerate(self.item_ids)})

    @classmethod
    def from_params(cls, item_ids, params) -> "ItemPosterior":
        return cls(item_ids=tuple(item_ids),
                   mu_a=np.asarray(params["items.mu_a"]),
                   logvar_a=np.asarray(params["items.logvar_a"]),
                   mu_d=np.asarray(params["items.mu_d"]),
                   logvar_d=np.asarray(params["items.logvar_d"]))

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def index_of(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise UnknownItemError(item_id) from None

    def mean_params(self, item_id: str) -> tuple[float, float]:
        i = self.index_of(item_id)
        return float(self.mu_a[i]), float(self.mu_d[i])


def _std_from_logvar(logvar):
    return engine.exp(0.5 * clip(logvar, LOGVAR_MIN, LOGVAR_MAX))


def item_sample(item_id: str, post: ItemPosterior, noise) -> tuple[float, float]:
    """Reparameterized draw of (a, d) for one item from two standard normals."""
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != (2,):
        raise ValueError("noise must be two standard normal draws")
    i = post.index_of(item_id)
    a = post.mu_a[i] + _std_from_logvar(post.logvar_a[i]) * eps[0]
    d = post.mu_d[i] + _std_from_logvar(post.logvar_d[i]) * eps[1]
    return float(a), float(d)


def item_kl(item_id: str, post: ItemPosterior, cfg: ModelConfig) -> float:
    """KL of the item's variational factor from its prior,
    N(1, sigma_a^2) x N(0, sigma_d^2)."""
    i = post.index_of(item_id)
    var_a = np.exp(np.clip(post.logvar_a[i], LOGVAR_MIN, LOGVAR_MAX))
    var_d = np.exp(np.clip(post.logvar_d[i], LOGVAR_MIN, LOGVAR_MAX))
    kl_a = gauss_kl(post.mu_a[i], var_a, 1.0, cfg.sigma_a ** 2)
    kl_d = gauss_kl(post.mu_d[i], var_d, 0.0, cfg.sigma_d ** 2)
    return float(kl_a + kl_d)


def potential_grid(net: PotentialNet, correct: int, a_values, d_values
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Dense (mu, log sigma^2) evaluation over an item-parameter grid.

    Returns two arrays of shape (len(a_values), len(d_values)); entry [i, j]
    is the potential at (a_values[i], d_values[j]) for the given response.
    """
    a_values = np.asarray(a_values, dtype=np.float64)
    d_values = np.asarray(d_values, dtype=np.float64)
    aa, dd = np.meshgrid(a_values, d_values, indexing="ij")
    x = np.column_stack([aa.ravel(), dd.ravel(),
                         np.full(aa.size, float(correct))])
    out = net.forward(x)
    mu = out[:, 0].reshape(aa.shape)
    logvar = np.clip(out[:, 1], LOGVAR_MIN, LOGVAR_MAX).reshape(aa.shape)
    return mu, logvar
