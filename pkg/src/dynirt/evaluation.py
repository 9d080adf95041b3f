"""Metrics, the leakage-safe next-step prediction harness, recovery scoring
against ground truth, and inference timing.

Predictions at step t are computed strictly from responses before t: each
knowledge component keeps its own evidence filter, and an item tagged with
several components is predicted from the average of their filtered ability
means.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .kernel import backward_recursion
from .model import InteractionRecord, ModelConfig
from .recognition import LOGVAR_MAX, LOGVAR_MIN
from .synth import SynthDataset
from .training import TrainedModel, infer_trajectories, smooth_from_inputs

__all__ = [
    "PredictionRecord",
    "RecoveryReport",
    "pearson",
    "auroc",
    "next_step_predictions",
    "recovery_report",
    "bench_inference",
    "kfold_learners",
]


def pearson(x, y) -> float:
    """Sample Pearson correlation; raises on zero variance (undefined, not 0)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("pearson needs two equal-length sequences of >= 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson is undefined for a zero-variance input")
    return float(np.sum(xc * yc) / (sx * sy))


def auroc(labels, scores) -> float:
    """Probability a random positive outranks a random negative; ties get
    half credit (Mann-Whitney form)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-D sequences")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc is undefined when only one class is present")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their block."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0])
    sorted_scores = scores[order]
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class PredictionRecord:
    """One next-step prediction: probability of a correct response at
    ``step`` computed from the learner's responses strictly before it."""

    learner_id: str
    step: int
    item_id: str
    predicted: float
    actual: int


@dataclass(frozen=True)
class RecoveryReport:
    """Pooled correlations against ground truth plus inference wall time."""

    ability_r: float
    discrimination_r: float
    difficulty_r: float
    inference_seconds: float


# ---------------------------------------------------------------------------
# per-component evidence filters (responses before t only)
# ---------------------------------------------------------------------------

class _LgmFilter:
    """Temporal filter: history potentials extended by one vacuous step,
    aggregated backwards and rolled forward; the mean at the appended step
    is the prediction."""

    def __init__(self, cfg: ModelConfig):
        self._lam_theta = cfg.lam_theta
        self._mu: list[float] = []
        self._lam: list[float] = []

    def predict(self) -> float:
        mus = self._mu + [0.0]
        lams = self._lam + [0.0]
        rhos, taus = backward_recursion(mus, lams, self._lam_theta)
        m = 0.0
        for rho, tau in zip(rhos, taus):
            m = (1.0 - rho) * m + rho * tau
        return float(m)

    def update(self, head: np.ndarray) -> None:
        self._mu.append(float(head[0]))
        self._lam.append(float(np.exp(-np.clip(head[1], LOGVAR_MIN, LOGVAR_MAX))))


class _PoeFilter:
    """Static product-of-experts filter: precision-weighted mean of the
    history potentials with the zero-mean prior."""

    def __init__(self, cfg: ModelConfig):
        self._lam = cfg.lam_theta
        self._lam_mu = 0.0

    def predict(self) -> float:
        return self._lam_mu / self._lam

    def update(self, head: np.ndarray) -> None:
        lam = float(np.exp(-np.clip(head[1], LOGVAR_MIN, LOGVAR_MAX)))
        self._lam += lam
        self._lam_mu += lam * float(head[0])


class _TransitionFilter:
    """Direct-transition filter: the running mean rolled through the
    learned per-step affine transitions."""

    def __init__(self, cfg: ModelConfig):
        self._m = 0.0

    def predict(self) -> float:
        return self._m

    def update(self, head: np.ndarray) -> None:
        alpha, beta = float(head[0]), float(head[1])
        self._m = alpha * self._m + beta


_FILTERS = {"vtirt": _LgmFilter, "vibo_poe": _PoeFilter, "dir_loc": _TransitionFilter}


def _filter_for(model: TrainedModel, transfer: bool):
    if transfer:
        if model.variant != "vibo_poe":
            raise ValueError("transfer prediction needs a vibo_poe model")
        return _LgmFilter
    return _FILTERS[model.variant]


def next_step_predictions(model: TrainedModel,
                          records: Sequence[InteractionRecord], *,
                          transfer: bool = False,
                          warn_unknown: bool = True) -> list[PredictionRecord]:
    """Filtered next-step correctness predictions for every interaction.

    For each (learner, step) the ability point estimate is the filtered mean
    from that learner's history within each knowledge component of the
    attempted item, averaged across those components; the first step of a
    component falls back to the prior mean 0. The probability is the 2PL
    response probability at the item-posterior means. Items outside the
    model vocabulary use the prior means (a=1, d=0) and trigger one warning.

    With ``transfer=True`` a vibo_poe model is evaluated through the
    temporal filter instead of its native product-of-experts one.
    """
    make_filter = _filter_for(model, transfer)
    cfg = model.model
    post = model.item_posterior()
    net = model.net()
    by_learner: dict[str, list[InteractionRecord]] = {}
    for r in records:
        by_learner.setdefault(r.learner_id, []).append(r)

    out: list[PredictionRecord] = []
    unknown = 0
    for lid in sorted(by_learner):
        recs = sorted(by_learner[lid], key=lambda r: r.step)
        if len({r.step for r in recs}) != len(recs):
            raise ValueError(f"learner {lid!r} has duplicate steps")
        filters: dict[str | None, object] = {}
        for r in recs:
            comps = r.kcs or (None,)
            if r.item_id in post:
                a_hat, d_hat = post.mean_params(r.item_id)
            else:
                a_hat, d_hat = 1.0, 0.0
                unknown += 1
            theta_hat = float(np.mean([
                filters[kc].predict() if kc in filters else 0.0 for kc in comps
            ]))
            p = float(expit(a_hat * (theta_hat - d_hat)))
            out.append(PredictionRecord(learner_id=lid, step=r.step,
                                        item_id=r.item_id, predicted=p,
                                        actual=r.correct))
            head = net.forward(np.array([[a_hat, d_hat, float(r.correct)]]))[0]
            for kc in comps:
                f = filters.get(kc)
                if f is None:
                    f = filters[kc] = make_filter(cfg)
                f.update(head)
    if unknown and warn_unknown:
        warnings.warn(f"{unknown} interaction(s) reference unknown items; "
                      "using prior item means", stacklevel=2)
    return out


def recovery_report(model: TrainedModel, synth: SynthDataset) -> RecoveryReport:
    """Correlate smoothed abilities and item-posterior means with the
    simulator's ground truth; times the full inference pass."""
    by_learner: dict[str, list[InteractionRecord]] = {}
    for r in synth.records:
        by_learner.setdefault(r.learner_id, []).append(r)
    learner_ids = sorted(by_learner)
    groups = [by_learner[lid] for lid in learner_ids]

    t0 = time.monotonic()
    results = infer_trajectories(model, groups)
    seconds = time.monotonic() - t0

    est = np.concatenate([means for means, _ in results])
    truth = np.concatenate([synth.true_abilities[lid].theta for lid in learner_ids])
    ability_r = pearson(est, truth)

    post = model.item_posterior()
    ids = [q for q in post.item_ids if q in synth.true_items]
    idx = [post.index_of(q) for q in ids]
    true_a = np.array([synth.true_items[q].a for q in ids])
    true_d = np.array([synth.true_items[q].d for q in ids])
    discrimination_r = pearson(post.mu_a[idx], true_a)
    difficulty_r = pearson(post.mu_d[idx], true_d)
    return RecoveryReport(ability_r=ability_r, discrimination_r=discrimination_r,
                          difficulty_r=difficulty_r, inference_seconds=seconds)


def bench_inference(model: TrainedModel, n_trajectories: int,
                    lengths: Sequence[int], *, seed: int = 0,
                    repeats: int = 3) -> list[dict]:
    """Throughput of batched smoothing per trajectory length.

    Synthetic query batches are drawn from the model's own vocabulary and
    fed to the array-level smoothing entry point (one recognition pass plus
    the two linear sweeps, no per-learner optimization). Each length is
    timed ``repeats`` times; the median wall time is reported alongside the
    individual runs.
    """
    post = model.item_posterior()
    rows = []
    for T in lengths:
        if n_trajectories == 0:
            continue
        rng = np.random.default_rng([seed, T])
        items = rng.integers(0, len(model.item_ids), size=(n_trajectories, T))
        a = post.mu_a[items]
        d = post.mu_d[items]
        correct = rng.integers(0, 2, size=(n_trajectories, T)).astype(np.float64)
        mask = np.ones((n_trajectories, T))
        runs = []
        for _ in range(repeats):
            t0 = time.monotonic()
            smooth_from_inputs(model, a, d, correct, mask)
            runs.append(time.monotonic() - t0)
        seconds = float(np.median(runs))
        rows.append({
            "length": int(T),
            "n_trajectories": int(n_trajectories),
            "seconds": seconds,
            "runs": runs,
            "traj_per_sec": n_trajectories / seconds if seconds > 0 else float("inf"),
        })
    return rows


def kfold_learners(learner_ids: Sequence[str], k: int = 5,
                   seed: int = 0) -> list[list[str]]:
    """Split learners into k disjoint folds covering everyone, seeded."""
    if k < 2:
        raise ValueError("k must be >= 2")
    ids = sorted(set(learner_ids))
    if len(ids) < k:
        raise ValueError("not enough learners for the requested fold count")
    order = np.random.default_rng([seed, 13]).permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(ids[i])
    return [sorted(f) for f in folds]
