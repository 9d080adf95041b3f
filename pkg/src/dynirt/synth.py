"""Seeded simulator for the generative model, with ground truth retained.

Every learner answers every item exactly once, in a per-learner random
permutation, with responses drawn from the 2PL likelihood along a random-walk
ability trajectory. Generation uses one Philox substream per learner (plus
one for the item table), so results are reproducible and independent of the
order learners are generated in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .model import InteractionRecord, ItemParams, ModelConfig, Trajectory

__all__ = ["SynthConfig", "SynthDataset", "sample_items", "simulate"]


@dataclass(frozen=True)
class SynthConfig:
    n_learners: int
    n_items: int
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_learners < 1 or self.n_items < 1:
            raise ValueError("n_learners and n_items must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass
class SynthDataset:
    """Simulated interactions plus the ground truth that produced them."""

    records: list[InteractionRecord]
    true_items: dict[str, ItemParams]
    true_abilities: dict[str, Trajectory]

    @property
    def learner_ids(self) -> list[str]:
        return sorted(self.true_abilities)


def _ids(count: int) -> list[str]:
    width = len(str(count - 1))
    return [str(i).zfill(width) for i in range(count)]


def _streams(cfg: SynthConfig) -> list[np.random.Generator]:
    # substream 0 drives the item table, substream i+1 drives learner i
    root = np.random.SeedSequence(cfg.seed)
    return [np.random.Generator(np.random.Philox(s))
            for s in root.spawn(cfg.n_learners + 1)]


def sample_items(cfg: SynthConfig) -> dict[str, ItemParams]:
    """Draw the item table: a ~ N(1, sigma_a^2), d ~ N(0, sigma_d^2)."""
    rng = _streams(cfg)[0]
    ids = _ids(cfg.n_items)
    a = 1.0 + cfg.model.sigma_a * rng.standard_normal(cfg.n_items)
    d = cfg.model.sigma_d * rng.standard_normal(cfg.n_items)
    return {ids[q]: ItemParams(item_id=ids[q], a=a[q], d=d[q])
            for q in range(cfg.n_items)}


def simulate(cfg: SynthConfig) -> SynthDataset:
    """Simulate the full dataset; reproducible byte-for-byte from the seed."""
    items = sample_items(cfg)
    item_ids = _ids(cfg.n_items)
    a = np.array([items[q].a for q in item_ids])
    d = np.array([items[q].d for q in item_ids])
    learner_ids = _ids(cfg.n_learners)
    streams = _streams(cfg)

    records: list[InteractionRecord] = []
    abilities: dict[str, Trajectory] = {}
    T = cfg.n_items
    for i, lid in enumerate(learner_ids):
        rng = streams[i + 1]
        # fixed draw order per learner: permutation, trajectory, responses
        perm = rng.permutation(T)
        theta = cfg.model.sigma_theta * np.cumsum(rng.standard_normal(T))
        prob = expit(a[perm] * (theta - d[perm]))
        correct = (rng.random(T) < prob).astype(int)
        abilities[lid] = Trajectory(learner_id=lid, theta=theta)
        for t in range(T):
            records.append(InteractionRecord(
                learner_id=lid,
                item_id=item_ids[perm[t]],
                correct=int(correct[t]),
                step=t + 1,
            ))
    return SynthDataset(records=records, true_items=items, true_abilities=abilities)
