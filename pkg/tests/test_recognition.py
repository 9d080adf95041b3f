import math

import numpy as np
import pytest

from dynirt.engine import Var, backward, nsum
from dynirt.model import ModelConfig
from dynirt.recognition import (
    HIDDEN_WIDTH,
    ItemPosterior,
    PotentialNet,
    UnknownItemError,
    init_item_params,
    init_net_params,
    item_kl,
    item_sample,
    net_forward,
    potential_forward,
    potential_grid,
)

from oracles import kl_by_quadrature, mlp_scalar


def random_net(seed=0):
    rng = np.random.default_rng(seed)
    params = init_net_params(rng, out_dim=2)
    params["net.w2"] = rng.standard_normal((HIDDEN_WIDTH, 2)) * 0.3
    params["net.b2"] = rng.standard_normal(2) * 0.3
    return PotentialNet.from_params(params)


def posterior_for(ids=("a", "b", "c"), seed=1):
    rng = np.random.default_rng(seed)
    n = len(ids)
    p = init_item_params(n)
    p["items.mu_a"] = p["items.mu_a"] + rng.normal(0, 0.5, n)
    p["items.mu_d"] = p["items.mu_d"] + rng.normal(0, 0.5, n)
    p["items.logvar_a"] = p["items.logvar_a"] + rng.normal(0, 0.5, n)
    p["items.logvar_d"] = p["items.logvar_d"] + rng.normal(0, 0.5, n)
    return ItemPosterior.from_params(ids, p)


class TestPotentialForward:
    def test_deterministic(self):
        net = random_net()
        one = potential_forward((1.2, -0.3), 1, net)
        two = potential_forward((1.2, -0.3), 1, net)
        assert one == two

    def test_sigma_always_positive(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            net = random_net(seed)
            for _ in range(20):
                a, d = rng.normal(0, 3, 2)
                pot = potential_forward((a, d), int(rng.integers(2)), net)
                assert pot.sigma > 0.0
                assert np.isfinite(pot.mu)

    def test_zero_head_is_constant(self):
        params = init_net_params(np.random.default_rng(3), out_dim=2)
        net = PotentialNet.from_params(params)
        pots = [potential_forward((a, d), r, net)
                for a in (-1.0, 0.5, 2.0) for d in (-2.0, 1.0) for r in (0, 1)]
        assert all(p.mu == 0.0 for p in pots)
        assert all(p.sigma == 1.0 for p in pots)  # exp(0.5 * 0)

    def test_matches_scalar_reimplementation(self):
        net = random_net(4)
        params = net.as_params()
        out = net.forward(np.array([[0.7, -1.1, 1.0]]))
        ref = mlp_scalar(params, [0.7, -1.1, 1.0], 2)
        np.testing.assert_allclose(out[0], ref, rtol=1e-12)

    def test_weight_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(5)
        net = random_net(6)
        params = net.as_params()
        x = np.array([[0.8, -0.4, 1.0], [1.5, 0.2, 0.0]])

        leaves = {k: Var(v.copy()) for k, v in params.items()}
        out = net_forward(leaves, x)
        weights = rng.standard_normal(out.value.shape)
        backward(nsum(out * weights))

        h = 1e-6
        for name in params:
            arr = params[name]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + h
                fp = float(np.sum(net_forward(params, x) * weights))
                arr[ix] = orig - h
                fm = float(np.sum(net_forward(params, x) * weights))
                arr[ix] = orig
                fd = (fp - fm) / (2 * h)
                assert leaves[name].grad[ix] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestItemSample:
    def test_zero_noise_gives_means(self):
        post = posterior_for()
        a, d = item_sample("b", post, np.zeros(2))
        assert a == pytest.approx(post.mu_a[1])
        assert d == pytest.approx(post.mu_d[1])

    def test_tiny_variance_degenerates_to_means(self):
        p = init_item_params(1)
        p["items.logvar_a"] = np.array([-60.0])  # clamps to -10, then shrink more
        post = ItemPosterior.from_params(("q",), p)
        a, _ = item_sample("q", post, np.array([3.0, 0.0]))
        # clamped at -10: std = e^-5
        assert abs(a - 1.0) <= 3.0 * math.exp(-5.0) + 1e-12

    def test_unknown_item_raises(self):
        post = posterior_for()
        with pytest.raises(UnknownItemError):
            item_sample("nope", post, np.zeros(2))

    def test_sample_moments(self):
        post = posterior_for(seed=8)
        rng = np.random.default_rng(9)
        n = 100_000
        draws = np.array([item_sample("a", post, rng.standard_normal(2)) for _ in range(n)])
        var_a = math.exp(np.clip(post.logvar_a[0], -10, 10))
        var_d = math.exp(np.clip(post.logvar_d[0], -10, 10))
        for col, mean, var in ((0, post.mu_a[0], var_a), (1, post.mu_d[0], var_d)):
            x = draws[:, col]
            assert abs(x.mean() - mean) < 4 * math.sqrt(var / n)
            assert abs(x.var(ddof=1) - var) < 4 * var * math.sqrt(2.0 / (n - 1))


class TestItemKl:
    def test_zero_at_prior(self):
        cfg = ModelConfig(sigma_a=1.3, sigma_d=0.8)
        p = init_item_params(1)
        p["items.logvar_a"] = np.array([2.0 * math.log(1.3)])
        p["items.logvar_d"] = np.array([2.0 * math.log(0.8)])
        post = ItemPosterior.from_params(("q",), p)
        assert item_kl("q", post, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_one_std_mean_shift(self):
        cfg = ModelConfig(sigma_a=1.5, sigma_d=1.0)
        p = init_item_params(1)
        p["items.mu_a"] = np.array([1.0 + 1.5])
        p["items.logvar_a"] = np.array([2.0 * math.log(1.5)])
        p["items.logvar_d"] = np.array([0.0])  # matches the d prior exactly
        post = ItemPosterior.from_params(("q",), p)
        assert item_kl("q", post, cfg) == pytest.approx(0.5)

    def test_matches_quadrature(self):
        cfg = ModelConfig(sigma_a=1.2, sigma_d=0.9)
        post = posterior_for(seed=10)
        i = post.index_of("c")
        expected = kl_by_quadrature(post.mu_a[i], math.exp(post.logvar_a[i]),
                                    1.0, cfg.sigma_a ** 2)
        expected += kl_by_quadrature(post.mu_d[i], math.exp(post.logvar_d[i]),
                                     0.0, cfg.sigma_d ** 2)
        assert item_kl("c", post, cfg) == pytest.approx(expected, rel=1e-8)

    def test_nonnegative_random(self):
        cfg = ModelConfig()
        for seed in range(10):
            post = posterior_for(seed=seed)
            for q in post.item_ids:
                assert item_kl(q, post, cfg) >= 0.0


class TestPotentialGrid:
    def test_single_cell_equals_forward(self):
        net = random_net(11)
        mu, logvar = potential_grid(net, 1, [1.4], [-0.2])
        pot = potential_forward((1.4, -0.2), 1, net)
        assert mu[0, 0] == pytest.approx(pot.mu)
        assert math.exp(0.5 * logvar[0, 0]) == pytest.approx(pot.sigma)

    def test_values_independent_of_traversal(self):
        net = random_net(12)
        a_vals = np.linspace(0.5, 2.0, 4)
        d_vals = np.linspace(-2.0, 2.0, 5)
        mu, logvar = potential_grid(net, 0, a_vals, d_vals)
        for i, a in enumerate(a_vals):
            for j, d in enumerate(d_vals):
                cell_mu, cell_lv = potential_grid(net, 0, [a], [d])
                assert mu[i, j] == pytest.approx(cell_mu[0, 0], rel=1e-12)
                assert logvar[i, j] == pytest.approx(cell_lv[0, 0], rel=1e-12)

    def test_grid_shape(self):
        net = random_net(13)
        mu, logvar = potential_grid(net, 1, np.linspace(0.5, 2, 7), np.linspace(-2, 2, 3))
        assert mu.shape == logvar.shape == (7, 3)
