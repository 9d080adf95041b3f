"""ELBO objectives, the minibatch training loop and inference entry points.

Three variants share one parameterization (a recognition network plus
per-item Gaussian posteriors) and differ only in how local evidence is
aggregated over a learner's timeline:

* ``vtirt``    - Gaussian ability potentials aggregated backwards into a
                 linear Gaussian chain (the full temporal posterior);
* ``dir_loc``  - the recognition network emits per-step transition
                 parameters (scale, bias, log variance ratio) directly;
* ``vibo_poe`` - a static ability with a product-of-experts aggregate.

Objectives are single-sample reparameterized ELBO estimates with analytic
(Rao-Blackwellized) KL terms, written entirely in engine ops so the same
code produces plain floats (no tape) or gradients.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernel
from .engine import (
    NonFiniteError,
    OptimizerState,
    ParamStore,
    Var,
    adam_step,
    clip,
    column,
    evaluate_with_gradients,
    exp,
    gather,
    nsum,
    reshape,
    sqrt,
    stack,
    where,
)
from .kernel import AbilityPotential, backward_recursion, conditional_params, step_kl_terms
from .model import InteractionRecord, ModelConfig, gauss_kl, loglik_from_logit
from .recognition import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    ItemPosterior,
    PotentialNet,
    init_item_params,
    init_net_params,
    net_forward,
)

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "TrainedModel",
    "TrainingError",
    "Batch",
    "NoiseBundle",
    "build_trajectories",
    "make_batch",
    "make_noise",
    "elbo_vtirt",
    "elbo_dir_loc",
    "elbo_vibo",
    "poe_posterior",
    "fit",
    "infer_trajectory",
    "infer_trajectories",
    "infer_transfer",
    "smooth_from_inputs",
    "lookup_item_means",
]

VARIANTS = ("vtirt", "dir_loc", "vibo_poe")


class TrainingError(RuntimeError):
    """A training step failed; carries epoch/batch context."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "vtirt"
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    val_fraction: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_samples: int = 1
    patience: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def as_dict(self) -> dict:
        return {
            "variant": self.variant,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "sigma_theta": self.model.sigma_theta,
            "sigma_a": self.model.sigma_a,
            "sigma_d": self.model.sigma_d,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "n_samples": self.n_samples,
            "patience": self.patience,
        }


@dataclass
class TrainedModel:
    """A loadable snapshot: parameters, variant tag, vocabulary and config."""

    params: ParamStore
    variant: str
    item_ids: tuple[str, ...]
    model: ModelConfig
    history: list[dict] = field(default_factory=list, repr=False)
    train_state: dict | None = field(default=None, repr=False)

    def net(self) -> PotentialNet:
        return PotentialNet.from_params(self.params)

    def item_posterior(self) -> ItemPosterior:
        return ItemPosterior.from_params(self.item_ids, self.params)


# ---------------------------------------------------------------------------
# trajectory and batch assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySeq:
    """One training sequence: a learner's records within one knowledge
    component (or their whole timeline when records carry no tags)."""

    learner_id: str
    kc: str | None
    item_idx: np.ndarray  # (T,) int, -1 marks an unknown item
    correct: np.ndarray   # (T,) float

    @property
    def T(self) -> int:
        return self.item_idx.shape[0]


def _group_by_learner(records: Sequence[InteractionRecord]) -> dict[str, list[InteractionRecord]]:
    by_learner: dict[str, list[InteractionRecord]] = {}
    for r in records:
        by_learner.setdefault(r.learner_id, []).append(r)
    for lid, recs in by_learner.items():
        recs.sort(key=lambda r: r.step)
        steps = [r.step for r in recs]
        if len(set(steps)) != len(steps):
            raise ValueError(f"learner {lid!r} has duplicate steps")
    return by_learner


def build_trajectories(records: Sequence[InteractionRecord],
                       item_index: Mapping[str, int]) -> list[TrajectorySeq]:
    """Split records into per-(learner, component) sequences, ordered by step.

    A record tagged with several knowledge components contributes one entry
    to each component's sequence; untagged records form a single sequence
    per learner.
    """
    out: list[TrajectorySeq] = []
    for lid, recs in sorted(_group_by_learner(records).items()):
        comps: dict[str | None, list[InteractionRecord]] = {}
        for r in recs:
            for kc in (r.kcs or (None,)):
                comps.setdefault(kc, []).append(r)
        for kc in sorted(comps, key=lambda k: (k is not None, k)):
            seq = comps[kc]
            out.append(TrajectorySeq(
                learner_id=lid,
                kc=kc,
                item_idx=np.array([item_index.get(r.item_id, -1) for r in seq],
                                  dtype=np.int64),
                correct=np.array([r.correct for r in seq], dtype=np.float64),
            ))
    return out


@dataclass(frozen=True)
class Batch:
    """Padded arrays for a set of sequences; mask is 1 on real steps."""

    item_idx: np.ndarray  # (B, T) int
    correct: np.ndarray   # (B, T) float
    mask: np.ndarray      # (B, T) float
    lengths: np.ndarray   # (B,) int

    @property
    def B(self) -> int:
        return self.item_idx.shape[0]

    @property
    def T(self) -> int:
        return self.item_idx.shape[1]

    @property
    def n_interactions(self) -> int:
        return int(self.lengths.sum())


def make_batch(seqs: Sequence[TrajectorySeq]) -> Batch:
    seqs = [s for s in seqs if s.T > 0]
    if not seqs:
        return Batch(item_idx=np.zeros((0, 0), dtype=np.int64),
                     correct=np.zeros((0, 0)), mask=np.zeros((0, 0)),
                     lengths=np.zeros(0, dtype=np.int64))
    B = len(seqs)
    T = max(s.T for s in seqs)
    item_idx = np.zeros((B, T), dtype=np.int64)
    correct = np.zeros((B, T))
    mask = np.zeros((B, T))
    for i, s in enumerate(seqs):
        item_idx[i, : s.T] = np.maximum(s.item_idx, 0)  # unknowns gather index 0
        correct[i, : s.T] = s.correct
        mask[i, : s.T] = 1.0
    return Batch(item_idx=item_idx, correct=correct, mask=mask,
                 lengths=np.array([s.T for s in seqs], dtype=np.int64))


@dataclass(frozen=True)
class NoiseBundle:
    """Standard-normal draws for one ELBO evaluation (S samples)."""

    item_a: np.ndarray  # (S, Q)
    item_d: np.ndarray  # (S, Q)
    theta: np.ndarray   # (S, B, T)

    @property
    def n_samples(self) -> int:
        return self.item_a.shape[0]


def make_noise(rng: np.random.Generator, n_samples: int, batch: Batch,
               n_items: int) -> NoiseBundle:
    """Draw order is fixed (item_a, item_d, theta) so runs are reproducible."""
    S = n_samples
    return NoiseBundle(
        item_a=rng.standard_normal((S, n_items)),
        item_d=rng.standard_normal((S, n_items)),
        theta=rng.standard_normal((S, batch.B, batch.T)),
    )


# ---------------------------------------------------------------------------
# ELBO objectives (engine-generic: plain arrays -> float, Vars -> tape)
# ---------------------------------------------------------------------------

def _item_draws(params, noise: NoiseBundle, s: int):
    std_a = exp(0.5 * clip(params["items.logvar_a"], LOGVAR_MIN, LOGVAR_MAX))
    std_d = exp(0.5 * clip(params["items.logvar_d"], LOGVAR_MIN, LOGVAR_MAX))
    a = params["items.mu_a"] + std_a * noise.item_a[s]
    d = params["items.mu_d"] + std_d * noise.item_d[s]
    return a, d


def _gathered_inputs(params, batch: Batch, a_vocab, d_vocab):
    """Per-interaction (a, d) pulled from the vocab plus the net input rows."""
    flat_idx = batch.item_idx.ravel()
    a_flat = gather(a_vocab, flat_idx)
    d_flat = gather(d_vocab, flat_idx)
    x = stack([a_flat, d_flat, batch.correct.ravel()], axis=1)
    out = net_forward(params, x)
    shape = (batch.B, batch.T)
    a_mat = reshape(a_flat, shape)
    d_mat = reshape(d_flat, shape)
    return a_mat, d_mat, out


def _item_kl_total(params, cfg: ModelConfig, weights: np.ndarray):
    var_a = exp(clip(params["items.logvar_a"], LOGVAR_MIN, LOGVAR_MAX))
    var_d = exp(clip(params["items.logvar_d"], LOGVAR_MIN, LOGVAR_MAX))
    kl = gauss_kl(params["items.mu_a"], var_a, 1.0, cfg.sigma_a ** 2) \
        + gauss_kl(params["items.mu_d"], var_d, 0.0, cfg.sigma_d ** 2)
    return nsum(kl * weights)


def _scale(values, factor):
    return values * factor if factor != 1.0 else values


def elbo_vtirt(batch: Batch, params, cfg: ModelConfig, noise: NoiseBundle,
               item_kl_weight: np.ndarray):
    """Temporal-potential ELBO, summed over the batch.

    Per sample: draw item parameters, map each interaction to a potential,
    aggregate backwards, roll a reparameterized trajectory forward, and
    score Bernoulli log-likelihoods minus per-step analytic KL terms.
    Padded steps carry exactly-vacuous potentials, so they contribute
    nothing to either term.
    """
    if batch.B == 0:
        return _empty_elbo(params, cfg, item_kl_weight)
    B, T = batch.B, batch.T
    lam_theta = cfg.lam_theta
    sample_terms = []
    for s in range(noise.n_samples):
        a_vocab, d_vocab = _item_draws(params, noise, s)
        a_mat, d_mat, out = _gathered_inputs(params, batch, a_vocab, d_vocab)
        mu_flat = column(out, 0)
        lam_flat = exp(-clip(column(out, 1), LOGVAR_MIN, LOGVAR_MAX))
        mu2 = reshape(mu_flat, (B, T))
        lam2 = reshape(lam_flat, (B, T))
        mus = [where(batch.mask[:, t] > 0, column(mu2, t), 0.0) for t in range(T)]
        lams = [where(batch.mask[:, t] > 0, column(lam2, t), 0.0) for t in range(T)]
        rhos, taus = backward_recursion(mus, lams, lam_theta)
        prev = np.zeros(B)
        prevs, thetas = [], []
        for t in range(T):
            mu_t, sig_t = conditional_params(prev, rhos[t], taus[t], cfg.sigma_theta)
            prevs.append(prev)
            prev = mu_t + sig_t * noise.theta[s, :, t]
            thetas.append(prev)
        prev_mat = stack(prevs, axis=1)
        theta_mat = stack(thetas, axis=1)
        kl_steps = step_kl_terms(prev_mat, stack(rhos, axis=1), stack(taus, axis=1),
                                 cfg.sigma_theta)
        z = a_mat * (theta_mat - d_mat)
        ll = loglik_from_logit(batch.correct, z) * batch.mask
        sample_terms.append(nsum(ll) - nsum(kl_steps))
    total = sample_terms[0]
    for term in sample_terms[1:]:
        total = total + term
    return _scale(total, 1.0 / noise.n_samples) - _item_kl_total(params, cfg, item_kl_weight)


def elbo_dir_loc(batch: Batch, params, cfg: ModelConfig, noise: NoiseBundle,
                 item_kl_weight: np.ndarray):
    """Direct-local ELBO: the network emits per-step transition parameters
    (scale alpha, bias beta, log variance ratio w with s^2 = sigma_theta^2 e^w);
    padded steps are pinned to the identity transition (1, 0, 0)."""
    if batch.B == 0:
        return _empty_elbo(params, cfg, item_kl_weight)
    B, T = batch.B, batch.T
    var_theta = cfg.sigma_theta ** 2
    sample_terms = []
    for s in range(noise.n_samples):
        a_vocab, d_vocab = _item_draws(params, noise, s)
        a_mat, d_mat, out = _gathered_inputs(params, batch, a_vocab, d_vocab)
        alpha2 = reshape(column(out, 0), (B, T))
        beta2 = reshape(column(out, 1), (B, T))
        w2 = reshape(clip(column(out, 2), LOGVAR_MIN, LOGVAR_MAX), (B, T))
        alphas = [where(batch.mask[:, t] > 0, column(alpha2, t), 1.0) for t in range(T)]
        betas = [where(batch.mask[:, t] > 0, column(beta2, t), 0.0) for t in range(T)]
        ws = [where(batch.mask[:, t] > 0, column(w2, t), 0.0) for t in range(T)]
        prev = np.zeros(B)
        prevs, thetas = [], []
        for t in range(T):
            sig_t = cfg.sigma_theta * exp(0.5 * ws[t])
            prevs.append(prev)
            prev = alphas[t] * prev + betas[t] + sig_t * noise.theta[s, :, t]
            thetas.append(prev)
        prev_mat = stack(prevs, axis=1)
        theta_mat = stack(thetas, axis=1)
        alpha_mat = stack(alphas, axis=1)
        beta_mat = stack(betas, axis=1)
        w_mat = stack(ws, axis=1)
        drift = (alpha_mat - 1.0) * prev_mat + beta_mat
        kl_steps = 0.5 * (exp(w_mat) - w_mat - 1.0) + drift * drift / (2.0 * var_theta)
        z = a_mat * (theta_mat - d_mat)
        ll = loglik_from_logit(batch.correct, z) * batch.mask
        sample_terms.append(nsum(ll) - nsum(kl_steps))
    total = sample_terms[0]
    for term in sample_terms[1:]:
        total = total + term
    return _scale(total, 1.0 / noise.n_samples) - _item_kl_total(params, cfg, item_kl_weight)


def elbo_vibo(batch: Batch, params, cfg: ModelConfig, noise: NoiseBundle,
              item_kl_weight: np.ndarray):
    """Static-ability ELBO: potentials are fused by a product of experts with
    the prior N(0, sigma_theta^2), one ability per sequence."""
    if batch.B == 0:
        return _empty_elbo(params, cfg, item_kl_weight)
    B, T = batch.B, batch.T
    lam0 = cfg.lam_theta
    sample_terms = []
    for s in range(noise.n_samples):
        a_vocab, d_vocab = _item_draws(params, noise, s)
        a_mat, d_mat, out = _gathered_inputs(params, batch, a_vocab, d_vocab)
        mu2 = reshape(column(out, 0), (B, T))
        lam2 = reshape(exp(-clip(column(out, 1), LOGVAR_MIN, LOGVAR_MAX)), (B, T))
        lam_mat = where(batch.mask > 0, lam2, 0.0)
        lam_post = nsum(lam_mat, axis=1) + lam0
        mean_post = nsum(lam_mat * mu2, axis=1) / lam_post
        var_post = 1.0 / lam_post
        theta = mean_post + sqrt(var_post) * noise.theta[s, :, 0]
        z = a_mat * (reshape(theta, (B, 1)) - d_mat)
        ll = loglik_from_logit(batch.correct, z) * batch.mask
        kl_theta = gauss_kl(mean_post, var_post, 0.0, 1.0 / lam0)
        sample_terms.append(nsum(ll) - nsum(kl_theta))
    total = sample_terms[0]
    for term in sample_terms[1:]:
        total = total + term
    return _scale(total, 1.0 / noise.n_samples) - _item_kl_total(params, cfg, item_kl_weight)


def _empty_elbo(params, cfg, item_kl_weight):
    # an empty batch still owes its (weighted) share of item KL, usually zero
    out = -1.0 * _item_kl_total(params, cfg, item_kl_weight)
    return out


_ELBO_FNS = {"vtirt": elbo_vtirt, "dir_loc": elbo_dir_loc, "vibo_poe": elbo_vibo}


def poe_posterior(potentials: Sequence[AbilityPotential],
                  prior_precision: float) -> tuple[float, float]:
    """Product-of-experts fusion of potentials with a zero-mean prior.

    Returns the (mean, variance) of the static ability aggregate; with no
    potentials this is just the prior.
    """
    if prior_precision <= 0:
        raise ValueError("prior precision must be positive")
    lam = prior_precision + sum(p.lam for p in potentials)
    weighted = sum(p.lam * p.mu for p in potentials)
    return weighted / lam, 1.0 / lam


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _head_shape(variant: str) -> tuple[int, np.ndarray]:
    if variant == "dir_loc":
        return 3, np.array([1.0, 0.0, 0.0])  # identity transition at init
    return 2, np.zeros(2)


def init_params(variant: str, n_items: int, rng: np.random.Generator) -> ParamStore:
    out_dim, head_bias = _head_shape(variant)
    store = ParamStore()
    for name, arr in init_net_params(rng, out_dim=out_dim, head_bias=head_bias).items():
        store.add(name, arr)
    for name, arr in init_item_params(n_items).items():
        store.add(name, arr)
    return store


def _item_counts(seqs: Sequence[TrajectorySeq], n_items: int) -> np.ndarray:
    counts = np.zeros(n_items)
    for s in seqs:
        known = s.item_idx[s.item_idx >= 0]
        np.add.at(counts, known, 1.0)
    return counts


def _batch_kl_weights(batch: Batch, total_counts: np.ndarray) -> np.ndarray:
    counts = np.zeros_like(total_counts)
    idx = batch.item_idx[batch.mask > 0]
    np.add.at(counts, idx, 1.0)
    return np.divide(counts, total_counts,
                     out=np.zeros_like(counts), where=total_counts > 0)


def _elbo_value(variant: str, batch: Batch, params, cfg: ModelConfig,
                noise: NoiseBundle, weights: np.ndarray) -> float:
    return float(_ELBO_FNS[variant](batch, params, cfg, noise, weights))


def fit(records: Sequence[InteractionRecord], cfg: TrainConfig, *,
        log_stream=None, resume: dict | None = None) -> TrainedModel:
    """Minibatch ELBO ascent; returns the best-validation snapshot.

    Learners are split once into train/validation groups; the validation
    ELBO is evaluated with noise that is fixed across epochs so that epoch
    scores are comparable. Progress is appended to ``log_stream`` as one
    JSON object per line with keys epoch, train_elbo, val_elbo, wall_time
    (per-sequence means). Raises :class:`TrainingError` on a non-finite
    step, naming the epoch and batch.
    """
    if not records:
        raise ValueError("cannot fit on an empty dataset")
    t_start = time.monotonic()
    item_ids = tuple(sorted({r.item_id for r in records}))
    item_index = {q: i for i, q in enumerate(item_ids)}
    n_items = len(item_ids)
    seqs = build_trajectories(records, item_index)

    learner_ids = sorted({s.learner_id for s in seqs})
    rng_split = np.random.default_rng([cfg.seed, 11])
    order = list(rng_split.permutation(len(learner_ids)))
    n_val = int(round(cfg.val_fraction * len(learner_ids)))
    val_learners = {learner_ids[i] for i in order[:n_val]}
    by_learner: dict[str, list[TrajectorySeq]] = {}
    for s in seqs:
        by_learner.setdefault(s.learner_id, []).append(s)
    train_learners = [l for l in learner_ids if l not in val_learners]
    train_seqs = [s for l in train_learners for s in by_learner[l]]
    val_seqs = [s for l in sorted(val_learners) for s in by_learner[l]]

    total_counts = _item_counts(train_seqs, n_items)
    var_cfg = cfg.model

    if resume is not None:
        _check_resume(resume, cfg)
        store = ParamStore({k: np.array(v) for k, v in resume["params"].items()})
        opt = OptimizerState(learning_rate=cfg.learning_rate, beta1=cfg.beta1,
                             beta2=cfg.beta2, eps=cfg.eps, step=resume["opt_step"],
                             m={k: np.array(v) for k, v in resume["opt_m"].items()},
                             v={k: np.array(v) for k, v in resume["opt_v"].items()})
        start_epoch = resume["next_epoch"]
        best_val = resume["best_val"]
        since_best = resume["since_best"]
        best_params = ParamStore({k: np.array(v) for k, v in resume["best_params"].items()})
    else:
        store = init_params(cfg.variant, n_items, np.random.default_rng([cfg.seed, 7]))
        opt = OptimizerState.for_store(store, learning_rate=cfg.learning_rate,
                                       beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        start_epoch = 0
        best_val = None
        since_best = 0
        best_params = store.copy()

    # validation batches and their noise are frozen for the whole run; the
    # validation score is the per-learner ELBO terms only (no item KL), so
    # epochs compare on held-out fit alone
    val_batches = []
    no_item_kl = np.zeros(n_items)
    rng_val = np.random.default_rng([cfg.seed, 5])
    for i in range(0, len(val_seqs), cfg.batch_size):
        vb = make_batch(val_seqs[i:i + cfg.batch_size])
        val_batches.append((vb, make_noise(rng_val, cfg.n_samples, vb, n_items),
                            no_item_kl))

    history: list[dict] = []

    def emit(rec: dict) -> None:
        history.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
            log_stream.flush()

    n_train = len(train_seqs)
    for epoch in range(start_epoch, cfg.epochs):
        rng_epoch = np.random.default_rng([cfg.seed, 1000 + epoch])
        learner_order = rng_epoch.permutation(len(train_learners))
        train_sum = 0.0
        batch_no = 0
        pos = 0
        while pos < len(train_learners):
            chunk = [train_learners[i] for i in learner_order[pos:pos + cfg.batch_size]]
            pos += cfg.batch_size
            batch_seqs = [s for l in chunk for s in by_learner[l]]
            batch = make_batch(batch_seqs)
            if batch.B == 0:
                continue
            noise = make_noise(rng_epoch, cfg.n_samples, batch, n_items)
            weights = _batch_kl_weights(batch, total_counts)
            elbo_fn = _ELBO_FNS[cfg.variant]

            def objective(leaves: dict[str, Var]) -> Var:
                return -1.0 * elbo_fn(batch, leaves, var_cfg, noise, weights)

            try:
                loss, grads = evaluate_with_gradients(objective, store)
                adam_step(store, grads, opt)
            except NonFiniteError as e:
                raise TrainingError(
                    f"non-finite value in epoch {epoch}, batch {batch_no}: {e}"
                ) from e
            train_sum += -loss
            batch_no += 1

        val_mean = None
        if val_batches:
            val_sum = 0.0
            for vb, vnoise, vweights in val_batches:
                val_sum += _elbo_value(cfg.variant, vb, store.as_dict(), var_cfg,
                                       vnoise, vweights)
            val_mean = val_sum / max(len(val_seqs), 1)
            if best_val is None or val_mean > best_val:
                best_val = val_mean
                best_params = store.copy()
                since_best = 0
            else:
                since_best += 1
        else:
            best_params = store.copy()

        emit({
            "epoch": epoch,
            "train_elbo": train_sum / max(n_train, 1),
            "val_elbo": val_mean,
            "wall_time": time.monotonic() - t_start,
        })
        if val_batches and since_best >= cfg.patience:
            break

    train_state = {
        "config": cfg.as_dict(),
        "params": {k: v.tolist() for k, v in store.items()},
        "best_params": {k: v.tolist() for k, v in best_params.items()},
        "opt_step": opt.step,
        "opt_m": {k: v.tolist() for k, v in opt.m.items()},
        "opt_v": {k: v.tolist() for k, v in opt.v.items()},
        "next_epoch": history[-1]["epoch"] + 1 if history else start_epoch,
        "best_val": best_val,
        "since_best": since_best,
    }
    return TrainedModel(params=best_params, variant=cfg.variant, item_ids=item_ids,
                        model=var_cfg, history=history, train_state=train_state)


def _check_resume(resume: dict, cfg: TrainConfig) -> None:
    # epochs and patience may be extended on resume; everything else pins
    # the optimization trajectory and must match bit for bit
    def strip(d: dict) -> dict:
        return {k: v for k, v in d.items() if k not in ("epochs", "patience")}

    saved = resume.get("config")
    if not isinstance(saved, dict) or strip(saved) != strip(cfg.as_dict()):
        raise ValueError("resume state was produced with a different train config")


# ---------------------------------------------------------------------------
# amortized inference
# ---------------------------------------------------------------------------

def lookup_item_means(model: TrainedModel, item_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized posterior-mean lookup for an array of item id strings.

    Unknown ids fall back to the prior means (a=1, d=0); the returned
    boolean array marks which ids were found.
    """
    ids = np.asarray(item_ids)
    vocab = np.array(model.item_ids)
    order = np.argsort(vocab)
    sorted_vocab = vocab[order]
    pos = np.clip(np.searchsorted(sorted_vocab, ids), 0, len(vocab) - 1)
    known = sorted_vocab[pos] == ids
    post = model.item_posterior()
    idx = order[pos]
    a = np.where(known, post.mu_a[idx], 1.0)
    d = np.where(known, post.mu_d[idx], 0.0)
    return a, d, known


def smooth_from_inputs(model: TrainedModel, a: np.ndarray, d: np.ndarray,
                       correct: np.ndarray, mask: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Batched smoothing from raw interaction arrays, all shaped (B, T).

    This is the amortized inference core: one recognition pass, one
    backward aggregation sweep and one forward rollout, O(B*T) total with
    no per-learner optimization. Masked-out cells become exactly-vacuous
    potentials, which leave every real step's aggregate untouched, so the
    vectorized sweep matches the per-learner path bit for bit.
    """
    B, T = a.shape
    x = np.column_stack([a.ravel(), d.ravel(), correct.ravel().astype(np.float64)])
    out = model.net().forward(x)
    on = mask > 0
    mu = np.where(on, out[:, 0].reshape(B, T), 0.0)
    lam = np.where(on, np.exp(-np.clip(out[:, 1], LOGVAR_MIN, LOGVAR_MAX)).reshape(B, T), 0.0)
    # contiguous per-step rows for the sweeps
    mu_t = list(np.ascontiguousarray(mu.T))
    lam_t = list(np.ascontiguousarray(lam.T))
    cfg = model.model
    rhos, taus = backward_recursion(mu_t, lam_t, cfg.lam_theta)
    var_theta = cfg.sigma_theta ** 2
    means = np.empty((B, T))
    variances = np.empty((B, T))
    m = np.zeros(B)
    v = np.zeros(B)
    for t in range(T):
        keep = 1.0 - rhos[t]
        m = keep * m + rhos[t] * taus[t]
        v = keep * keep * v + var_theta * keep
        means[:, t] = m
        variances[:, t] = v
    return means, variances


def _groups_to_inputs(model: TrainedModel,
                      groups: Sequence[Sequence[InteractionRecord]],
                      warn_unknown: bool) -> tuple[np.ndarray, ...]:
    lengths = np.array([len(g) for g in groups], dtype=np.int64)
    B, T = len(groups), int(lengths.max())
    flat_ids = np.array([r.item_id for g in groups for r in g])
    flat_correct = np.fromiter((r.correct for g in groups for r in g),
                               dtype=np.float64, count=int(lengths.sum()))
    a_flat, d_flat, known = lookup_item_means(model, flat_ids)
    n_unknown = int((~known).sum())
    if n_unknown and warn_unknown:
        warnings.warn(f"{n_unknown} interaction(s) reference unknown items; "
                      "using prior item means", stacklevel=3)
    a = np.ones((B, T))
    d = np.zeros((B, T))
    correct = np.zeros((B, T))
    mask = np.zeros((B, T))
    pos = 0
    for i, n in enumerate(lengths):
        a[i, :n] = a_flat[pos:pos + n]
        d[i, :n] = d_flat[pos:pos + n]
        correct[i, :n] = flat_correct[pos:pos + n]
        mask[i, :n] = 1.0
        pos += n
    return a, d, correct, mask, lengths


def infer_trajectory(model: TrainedModel, records: Sequence[InteractionRecord],
                     *, warn_unknown: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed ability marginals (means, variances) for one learner.

    Purely amortized: one recognition pass plus one backward/forward sweep,
    no per-learner optimization. Records are taken in step order.
    """
    if model.variant != "vtirt":
        raise ValueError(f"infer_trajectory expects a vtirt model, got {model.variant!r}")
    return _infer_single(model, records, warn_unknown)


def infer_transfer(model: TrainedModel, records: Sequence[InteractionRecord],
                   *, warn_unknown: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Temporal smoothing inference reusing recognition weights trained with
    the static product-of-experts objective."""
    if model.variant != "vibo_poe":
        raise ValueError(f"infer_transfer expects a vibo_poe model, got {model.variant!r}")
    return _infer_single(model, records, warn_unknown)


def _infer_single(model, records, warn_unknown):
    if not records:
        return np.zeros(0), np.zeros(0)
    result = infer_trajectories(model, [records], warn_unknown=warn_unknown,
                                _skip_variant_check=True)
    return result[0]


def infer_trajectories(model: TrainedModel,
                       groups: Sequence[Sequence[InteractionRecord]],
                       *, warn_unknown: bool = True,
                       _skip_variant_check: bool = False
                       ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batched smoothing over many record groups (one learner each)."""
    if not _skip_variant_check and model.variant == "dir_loc":
        raise ValueError("trajectory smoothing is not defined for dir_loc models")
    groups = [sorted(g, key=lambda r: r.step) for g in groups]
    if not groups or max(len(g) for g in groups) == 0:
        return [(np.zeros(0), np.zeros(0)) for _ in groups]
    a, d, correct, mask, lengths = _groups_to_inputs(model, groups, warn_unknown)
    means, variances = smooth_from_inputs(model, a, d, correct, mask)
    return [(means[i, :n].copy(), variances[i, :n].copy())
            for i, n in enumerate(lengths)]
