import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from dynirt.engine import OptimizerState, adam_step, evaluate_with_gradients
from dynirt.kernel import AbilityPotential, vacuous_potential
from dynirt.model import InteractionRecord, ModelConfig
from dynirt.synth import SynthConfig, simulate
from dynirt.training import (
    TrainConfig,
    TrainingError,
    _batch_kl_weights,
    _item_counts,
    build_trajectories,
    elbo_dir_loc,
    elbo_vibo,
    elbo_vtirt,
    fit,
    infer_trajectories,
    infer_trajectory,
    infer_transfer,
    init_params,
    make_batch,
    make_noise,
    poe_posterior,
)

from oracles import (
    bern_loglik_scalar,
    dense_joint,
    direct_elbo_dir_loc,
    direct_elbo_vibo,
    direct_elbo_vtirt,
    log_marginal_two_step,
)

CFG = ModelConfig(sigma_theta=0.5, sigma_a=1.0, sigma_d=1.0)


def micro_setup(variant="vtirt", seed=0, perturb=0.3):
    """2 learners, 3 items, T up to 3, randomized parameters."""
    seqs = build_trajectories(
        [
            InteractionRecord("l0", "q0", 1, 1),
            InteractionRecord("l0", "q2", 0, 2),
            InteractionRecord("l0", "q1", 1, 3),
            InteractionRecord("l1", "q1", 0, 1),
            InteractionRecord("l1", "q0", 0, 2),
        ],
        {"q0": 0, "q1": 1, "q2": 2},
    )
    batch = make_batch(seqs)
    store = init_params(variant, 3, np.random.default_rng(7))
    rng = np.random.default_rng(seed)
    if perturb:
        for name in store.names():
            store[name] = store[name] + perturb * rng.standard_normal(store[name].shape)
    weights = np.array([0.5, 1.0, 0.25])
    return seqs, batch, store, weights


ELBOS = {
    "vtirt": (elbo_vtirt, direct_elbo_vtirt),
    "dir_loc": (elbo_dir_loc, direct_elbo_dir_loc),
    "vibo_poe": (elbo_vibo, direct_elbo_vibo),
}


class TestElboAgainstDirectOracle:
    @pytest.mark.parametrize("variant", list(ELBOS))
    def test_micro_case_matches(self, variant):
        seqs, batch, store, weights = micro_setup(variant)
        fn, oracle = ELBOS[variant]
        for noise_seed in range(3):
            noise = make_noise(np.random.default_rng(noise_seed), 1, batch, 3)
            got = float(fn(batch, store.as_dict(), CFG, noise, weights))
            want = oracle(seqs, store.as_dict(), CFG, noise, weights)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9)

    @pytest.mark.parametrize("variant", list(ELBOS))
    def test_multi_sample_matches(self, variant):
        seqs, batch, store, weights = micro_setup(variant)
        fn, oracle = ELBOS[variant]
        noise = make_noise(np.random.default_rng(5), 4, batch, 3)
        got = float(fn(batch, store.as_dict(), CFG, noise, weights))
        want = oracle(seqs, store.as_dict(), CFG, noise, weights)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_zero_length_learner_contributes_nothing():
    seqs, batch, store, weights = micro_setup()
    empty = make_batch([])
    noise = make_noise(np.random.default_rng(1), 1, empty, 3)
    assert float(elbo_vtirt(empty, store.as_dict(), CFG, noise, np.zeros(3))) == 0.0


def test_vacuous_potentials_and_prior_items_reduce_to_loglik():
    # huge-variance head output makes every step KL negligible, and an item
    # posterior equal to the prior has exactly zero KL; the ELBO is then the
    # prior-path log-likelihood
    seqs, batch, store, _ = micro_setup(perturb=0.0)
    store["net.b2"] = np.array([0.0, 10.0])  # logvar pinned at the clamp max
    store["items.logvar_a"] = np.zeros(3)    # prior is N(1, 1), N(0, 1)
    store["items.logvar_d"] = np.zeros(3)
    weights = np.ones(3)
    noise = make_noise(np.random.default_rng(2), 1, batch, 3)
    got = float(elbo_vtirt(batch, store.as_dict(), CFG, noise, weights))

    a = store["items.mu_a"] + 1.0 * noise.item_a[0]
    d = store["items.mu_d"] + 1.0 * noise.item_d[0]
    ll = 0.0
    for b, seq in enumerate(seqs):
        prev = 0.0
        for t, (q, r) in enumerate(zip(seq.item_idx, seq.correct)):
            theta = prev + CFG.sigma_theta * noise.theta[0, b, t]
            ll += bern_loglik_scalar(r, a[q], d[q], theta)
            prev = theta
    assert got == pytest.approx(ll, rel=5e-3, abs=5e-3)


def test_dir_loc_identity_transitions_recover_prior_exactly():
    seqs, batch, store, _ = micro_setup("dir_loc", perturb=0.0)
    # zero head with bias (1, 0, 0): alpha=1, beta=0, s=sigma_theta
    store["items.logvar_a"] = np.zeros(3)
    store["items.logvar_d"] = np.zeros(3)
    noise = make_noise(np.random.default_rng(3), 1, batch, 3)
    got = float(elbo_dir_loc(batch, store.as_dict(), CFG, noise, np.ones(3)))
    a = store["items.mu_a"] + noise.item_a[0]
    d = store["items.mu_d"] + noise.item_d[0]
    ll = 0.0
    for b, seq in enumerate(seqs):
        prev = 0.0
        for t, (q, r) in enumerate(zip(seq.item_idx, seq.correct)):
            theta = prev + CFG.sigma_theta * noise.theta[0, b, t]
            ll += bern_loglik_scalar(r, a[q], d[q], theta)
            prev = theta
    assert got == pytest.approx(ll, rel=1e-12)


class TestPoePosterior:
    def test_no_potentials_is_prior(self):
        mean, var = poe_posterior([], prior_precision=4.0)
        assert (mean, var) == (0.0, 0.25)

    def test_single_potential_conjugacy(self):
        mean, var = poe_posterior([AbilityPotential(2.0, 1.0)], prior_precision=1.0)
        assert mean == pytest.approx(1.0)
        assert var == pytest.approx(0.5)

    def test_matches_density_product_on_grid(self):
        rng = np.random.default_rng(4)
        pots = [AbilityPotential(float(rng.normal()), float(rng.uniform(0.3, 2.0)))
                for _ in range(3)]
        lam0 = 2.0
        mean, var = poe_posterior(pots, prior_precision=lam0)
        x = np.linspace(-10, 10, 200_001)
        log_density = -0.5 * lam0 * x ** 2
        for p in pots:
            log_density = log_density - 0.5 * (x - p.mu) ** 2 / p.sigma ** 2
        w = np.exp(log_density - log_density.max())
        w /= w.sum()
        grid_mean = float(np.sum(w * x))
        grid_var = float(np.sum(w * (x - grid_mean) ** 2))
        assert mean == pytest.approx(grid_mean, abs=1e-6)
        assert var == pytest.approx(grid_var, rel=1e-4)

    def test_vacuous_potentials_ignored(self):
        mean, var = poe_posterior([vacuous_potential()] * 5, prior_precision=2.0)
        assert (mean, var) == (0.0, 0.5)


def test_single_sample_estimates_unbiased_two_sample_check():
    seqs, batch, store, weights = micro_setup(seed=6)
    n = 4000

    def draws(seed):
        rng = np.random.default_rng(seed)
        out = np.empty(n)
        for i in range(n):
            noise = make_noise(rng, 1, batch, 3)
            out[i] = float(elbo_vtirt(batch, store.as_dict(), CFG, noise, weights))
        return out

    a, b = draws(100), draws(200)
    t_stat, _ = stats.ttest_ind(a, b, equal_var=False)
    assert abs(t_stat) < 5.0


@pytest.mark.parametrize("variant", list(ELBOS))
@pytest.mark.parametrize("responses", [(1, 1), (1, 0), (0, 0)])
def test_elbo_bounded_by_log_marginal(variant, responses):
    # one learner, two steps on two distinct items; log p(r) by quadrature
    r1, r2 = responses
    seqs = build_trajectories(
        [InteractionRecord("l", "q0", r1, 1), InteractionRecord("l", "q1", r2, 2)],
        {"q0": 0, "q1": 1},
    )
    batch = make_batch(seqs)
    store = init_params(variant, 2, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    for name in store.names():
        store[name] = store[name] + 0.2 * rng.standard_normal(store[name].shape)
    weights = np.ones(2)
    fn = ELBOS[variant][0]
    n = 20_000
    rng = np.random.default_rng(10)
    vals = np.empty(n)
    for i in range(n):
        noise = make_noise(rng, 1, batch, 2)
        vals[i] = float(fn(batch, store.as_dict(), CFG, noise, weights))
    log_p = log_marginal_two_step(r1, r2, CFG, n_nodes=48)
    se = vals.std(ddof=1) / math.sqrt(n)
    assert vals.mean() <= log_p + 4 * se


class TestTrajectoryBuilding:
    def test_kc_expansion(self):
        records = [
            InteractionRecord("l", "q0", 1, 1, kcs=("alg", "geo")),
            InteractionRecord("l", "q1", 0, 2, kcs=("alg",)),
            InteractionRecord("l", "q2", 1, 3, kcs=("geo",)),
        ]
        seqs = build_trajectories(records, {"q0": 0, "q1": 1, "q2": 2})
        by_kc = {s.kc: s for s in seqs}
        assert set(by_kc) == {"alg", "geo"}
        np.testing.assert_array_equal(by_kc["alg"].item_idx, [0, 1])
        np.testing.assert_array_equal(by_kc["geo"].item_idx, [0, 2])

    def test_untagged_records_form_one_sequence(self):
        records = [InteractionRecord("l", "q0", 1, 3),
                   InteractionRecord("l", "q1", 0, 1)]
        seqs = build_trajectories(records, {"q0": 0, "q1": 1})
        assert len(seqs) == 1
        np.testing.assert_array_equal(seqs[0].item_idx, [1, 0])  # step order

    def test_duplicate_steps_rejected(self):
        records = [InteractionRecord("l", "q0", 1, 1),
                   InteractionRecord("l", "q1", 0, 1)]
        with pytest.raises(ValueError):
            build_trajectories(records, {"q0": 0, "q1": 1})

    def test_kl_weights_match_counts(self):
        records = [InteractionRecord("l0", "q0", 1, 1),
                   InteractionRecord("l0", "q1", 0, 2),
                   InteractionRecord("l1", "q0", 1, 1)]
        seqs = build_trajectories(records, {"q0": 0, "q1": 1})
        totals = _item_counts(seqs, 2)
        np.testing.assert_array_equal(totals, [2.0, 1.0])
        batch = make_batch(seqs[:1])  # just learner l0
        w = _batch_kl_weights(batch, totals)
        np.testing.assert_allclose(w, [0.5, 1.0])


def small_dataset(seed=3, n_learners=12, n_items=6):
    return simulate(SynthConfig(n_learners=n_learners, n_items=n_items,
                                model=ModelConfig(sigma_theta=0.25), seed=seed))


class TestFit:
    def test_deterministic_given_seed(self):
        data = small_dataset()
        cfg = TrainConfig(variant="vtirt", batch_size=12, epochs=2, seed=4,
                          val_fraction=0.25, model=ModelConfig(sigma_theta=0.25))
        m1 = fit(data.records, cfg)
        m2 = fit(data.records, cfg)
        for name in m1.params.names():
            np.testing.assert_array_equal(m1.params[name], m2.params[name])
        assert m1.history == m2.history or all(
            h1["train_elbo"] == h2["train_elbo"] and h1["val_elbo"] == h2["val_elbo"]
            for h1, h2 in zip(m1.history, m2.history))

    @pytest.mark.parametrize("variant", list(ELBOS))
    def test_variant_routing(self, variant):
        data = small_dataset()
        cfg = TrainConfig(variant=variant, batch_size=12, epochs=1, seed=4,
                          val_fraction=0.0, model=ModelConfig(sigma_theta=0.25))
        model = fit(data.records, cfg)
        assert model.variant == variant
        head = 3 if variant == "dir_loc" else 2
        assert model.params["net.b2"].shape == (head,)

    def test_first_epoch_value_equals_direct_objective_call(self):
        # full-batch fit, epoch 0 logs the ELBO at the freshly initialized
        # parameters; rebuild the exact same batch and noise and compare
        data = small_dataset()
        cfg = TrainConfig(variant="vtirt", batch_size=50, epochs=1, seed=4,
                          val_fraction=0.0, model=ModelConfig(sigma_theta=0.25))
        model = fit(data.records, cfg)
        item_ids = tuple(sorted({r.item_id for r in data.records}))
        index = {q: i for i, q in enumerate(item_ids)}
        seqs = build_trajectories(data.records, index)
        by_learner = {}
        for s in seqs:
            by_learner.setdefault(s.learner_id, []).append(s)
        learners = sorted(by_learner)
        rng_epoch = np.random.default_rng([cfg.seed, 1000])
        order = rng_epoch.permutation(len(learners))
        batch_seqs = [s for i in order for s in by_learner[learners[i]]]
        batch = make_batch(batch_seqs)
        noise = make_noise(rng_epoch, 1, batch, len(item_ids))
        weights = _batch_kl_weights(batch, _item_counts(seqs, len(item_ids)))
        store = init_params("vtirt", len(item_ids), np.random.default_rng([cfg.seed, 7]))
        direct = float(elbo_vtirt(batch, store.as_dict(),
                                  ModelConfig(sigma_theta=0.25), noise, weights))
        assert model.history[0]["train_elbo"] == pytest.approx(
            direct / len(seqs), rel=1e-12)

    def test_fixed_noise_full_batch_updates_are_monotone(self):
        # measured property: 200 Adam steps on one fixed batch with fixed
        # noise never decrease the objective
        data = small_dataset(seed=2, n_learners=10, n_items=8)
        cfg_m = ModelConfig(sigma_theta=0.25)
        item_ids = tuple(sorted({r.item_id for r in data.records}))
        index = {q: i for i, q in enumerate(item_ids)}
        seqs = build_trajectories(data.records, index)
        batch = make_batch(seqs)
        store = init_params("vtirt", len(item_ids), np.random.default_rng(7))
        noise = make_noise(np.random.default_rng(3), 1, batch, len(item_ids))
        weights = _batch_kl_weights(batch, _item_counts(seqs, len(item_ids)))
        opt = OptimizerState.for_store(store)
        values = []
        for _ in range(200):
            loss, grads = evaluate_with_gradients(
                lambda p: -1.0 * elbo_vtirt(batch, p, cfg_m, noise, weights), store)
            adam_step(store, grads, opt)
            values.append(-loss)
        diffs = np.diff(values)
        assert values[-1] > values[0]
        assert np.all(diffs >= -1e-9)

    def test_resume_reproduces_next_epoch_values(self):
        data = small_dataset()
        base = dict(variant="vtirt", batch_size=6, seed=4, val_fraction=0.25,
                    model=ModelConfig(sigma_theta=0.25))
        full = fit(data.records, TrainConfig(epochs=4, **base))
        part = fit(data.records, TrainConfig(epochs=2, **base))
        resumed = fit(data.records, TrainConfig(epochs=4, **base),
                      resume=part.train_state)
        assert [h["epoch"] for h in resumed.history] == [2, 3]
        for h_full, h_res in zip(full.history[2:], resumed.history):
            assert h_full["train_elbo"] == h_res["train_elbo"]
            assert h_full["val_elbo"] == h_res["val_elbo"]
        for name in full.params.names():
            np.testing.assert_array_equal(full.params[name], resumed.params[name])

    def test_resume_rejects_different_config(self):
        data = small_dataset()
        base = dict(variant="vtirt", batch_size=6, seed=4, val_fraction=0.25,
                    model=ModelConfig(sigma_theta=0.25))
        part = fit(data.records, TrainConfig(epochs=1, **base))
        with pytest.raises(ValueError):
            fit(data.records, TrainConfig(epochs=2, seed=5, **{k: v for k, v in base.items() if k != "seed"}),
                resume=part.train_state)

    def test_log_stream_is_json_lines(self):
        data = small_dataset()
        cfg = TrainConfig(variant="vibo_poe", batch_size=12, epochs=2, seed=4,
                          val_fraction=0.25, model=ModelConfig(sigma_theta=0.25))
        buf = io.StringIO()
        fit(data.records, cfg, log_stream=buf)
        lines = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert [rec["epoch"] for rec in lines] == [0, 1]
        for rec in lines:
            assert set(rec) == {"epoch", "train_elbo", "val_elbo", "wall_time"}

    def test_nonfinite_step_raises_training_error_with_context(self):
        data = small_dataset()
        base = dict(variant="vtirt", batch_size=6, seed=4, val_fraction=0.25,
                    model=ModelConfig(sigma_theta=0.25))
        part = fit(data.records, TrainConfig(epochs=1, **base))
        state = part.train_state
        poisoned = {k: (np.array(v) * 0 + 1e200).tolist() if k.startswith("items.mu") else v
                    for k, v in state["params"].items()}
        state = dict(state, params=poisoned)
        with pytest.raises(TrainingError, match="epoch 1"):
            fit(data.records, TrainConfig(epochs=2, **base), resume=state)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit([], TrainConfig())


class TestInference:
    def make_model(self, variant="vtirt", seed=0):
        data = small_dataset(seed=seed)
        cfg = TrainConfig(variant=variant, batch_size=12, epochs=3, seed=seed,
                          val_fraction=0.0, model=ModelConfig(sigma_theta=0.25))
        return fit(data.records, cfg), data

    def test_empty_records_give_empty_output(self):
        model, _ = self.make_model()
        means, variances = infer_trajectory(model, [])
        assert means.shape == (0,) and variances.shape == (0,)

    def test_near_vacuous_potentials_recover_prior(self):
        model, _ = self.make_model()
        model.params["net.w2"] = np.zeros_like(model.params["net.w2"])
        model.params["net.b2"] = np.array([0.0, 10.0])  # sigma^2 = e^10
        records = [InteractionRecord("l", model.item_ids[0], 1, t) for t in range(1, 5)]
        means, variances = infer_trajectory(model, records)
        prior_var = 0.25 ** 2 * np.arange(1, 5)
        np.testing.assert_allclose(means, np.zeros(4), atol=1e-3)
        np.testing.assert_allclose(variances, prior_var, rtol=2e-3)

    def test_matches_dense_oracle_on_micro_case(self):
        model, data = self.make_model()
        records = sorted(
            (r for r in data.records if r.learner_id == "00"), key=lambda r: r.step
        )[:5]
        means, variances = infer_trajectory(model, records)
        # rebuild the potentials exactly as inference does and solve densely
        post = model.item_posterior()
        net = model.net()
        mus, lams = [], []
        for r in records:
            a, d = post.mean_params(r.item_id)
            out = net.forward(np.array([[a, d, float(r.correct)]]))[0]
            mus.append(out[0])
            lams.append(math.exp(-np.clip(out[1], -10, 10)))
        mean_ref, cov_ref = dense_joint(mus, lams, model.model.lam_theta)
        np.testing.assert_allclose(means, mean_ref, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(variances, np.diag(cov_ref), rtol=1e-9, atol=1e-12)

    def test_variant_gates(self):
        vtirt_model, data = self.make_model("vtirt")
        vibo_model, _ = self.make_model("vibo_poe")
        records = [r for r in data.records if r.learner_id == "00"]
        with pytest.raises(ValueError):
            infer_trajectory(vibo_model, records)
        with pytest.raises(ValueError):
            infer_transfer(vtirt_model, records)
        means, variances = infer_transfer(vibo_model, records)
        assert means.shape == variances.shape == (6,)

    def test_transfer_smoothing_differs_from_poe_filter(self):
        # two conflicting responses: temporal smoothing keeps step-level
        # structure that the static product of experts collapses
        model, _ = self.make_model("vibo_poe")
        records = [InteractionRecord("l", model.item_ids[0], 1, 1),
                   InteractionRecord("l", model.item_ids[1], 0, 2)]
        means, _ = infer_transfer(model, records)
        post = model.item_posterior()
        net = model.net()
        lam = model.model.lam_theta
        lam_mu = 0.0
        for r in records:
            a, d = post.mean_params(r.item_id)
            out = net.forward(np.array([[a, d, float(r.correct)]]))[0]
            l = math.exp(-np.clip(out[1], -10, 10))
            lam += l
            lam_mu += l * out[0]
        poe_mean = lam_mu / lam
        assert means[0] != pytest.approx(means[1], abs=1e-9) or \
            means[1] != pytest.approx(poe_mean, abs=1e-9)

    def test_unknown_items_warn_and_use_prior_means(self):
        model, _ = self.make_model()
        records = [InteractionRecord("l", "missing", 1, 1)]
        with pytest.warns(UserWarning, match="unknown items"):
            means, variances = infer_trajectory(model, records)
        net = model.net()
        out = net.forward(np.array([[1.0, 0.0, 1.0]]))[0]
        lam = math.exp(-np.clip(out[1], -10, 10))
        lam_theta = model.model.lam_theta
        expected = (lam * out[0]) / (lam_theta + lam)
        assert means[0] == pytest.approx(expected, rel=1e-9)

    def test_batched_matches_single(self):
        model, data = self.make_model()
        by_learner = {}
        for r in data.records:
            by_learner.setdefault(r.learner_id, []).append(r)
        groups = [by_learner[k] for k in sorted(by_learner)][:8]
        batched = infer_trajectories(model, groups)
        for g, (bm, bv) in zip(groups, batched):
            m, v = infer_trajectory(model, g)
            np.testing.assert_array_equal(m, bm)
            np.testing.assert_array_equal(v, bv)
