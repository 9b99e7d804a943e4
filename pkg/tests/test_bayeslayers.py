import math

import numpy as np
import pytest

from seqrisk import bayeslayers as bl
from seqrisk import numcore as nc
from seqrisk.numcore import Tape, Tensor, backward

from gradcheck import assert_grads_close


def make_posterior(mu, sigma):
    mu = np.asarray(mu, dtype=float)
    rho = np.log(np.expm1(np.broadcast_to(np.asarray(sigma, dtype=float), mu.shape)))
    return bl.GaussianPosterior(
        Tensor(mu, requires_grad=True), Tensor(rho, requires_grad=True)
    )


class TestSampleWeights:
    def test_sigma_zero_limit_returns_mean(self):
        post = bl.GaussianPosterior(
            Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True),
            Tensor(np.full(3, -60.0), requires_grad=True),
        )
        w = bl.sample_weights(post, np.random.default_rng(0))
        np.testing.assert_allclose(w.data, post.mean.data, atol=1e-12)

    def test_monte_carlo_moments_standard_normal(self):
        post = make_posterior(np.zeros(1_000_000), 1.0)
        w = bl.sample_weights(post, np.random.default_rng(42)).data
        assert abs(w.mean()) < 0.005
        assert abs(w.var() - 1.0) < 0.01

    def test_fixed_seed_reproducible(self):
        post = make_posterior(np.zeros((3, 3)), 0.7)
        a = bl.sample_weights(post, np.random.default_rng(123)).data
        b = bl.sample_weights(post, np.random.default_rng(123)).data
        assert np.array_equal(a, b)

    def test_differentiable_wrt_mean_and_rho(self):
        rng = np.random.default_rng(8)
        post = make_posterior(rng.normal(size=(2, 3)), 0.4)
        eps_rng = [np.random.default_rng(99)]

        def build():
            eps_rng[0] = np.random.default_rng(99)  # common random numbers
            w = bl.sample_weights(post, eps_rng[0])
            return nc.reduce_sum(nc.mul(w, w))

        assert_grads_close(build, [post.mean, post.rho])


class TestKL:
    def test_zero_exactly_at_prior(self):
        post = make_posterior(np.zeros((4, 5)), 0.292)
        prior = bl.IsotropicPrior(std=float(post.std_values()[0, 0]))
        assert bl.kl_to_prior(post, prior).item() == 0.0

    def test_unit_gaussian_mean_shift(self):
        # KL(N(1,1) || N(0,1)) = 0.5
        post = make_posterior(np.array([1.0]), 1.0)
        assert abs(bl.kl_to_prior(post, bl.IsotropicPrior(1.0)).item() - 0.5) < 1e-12

    def test_half_width_posterior_closed_form(self):
        # KL(N(0,0.5^2) || N(0,1)) = ln 2 + 0.125 - 0.5
        post = make_posterior(np.array([0.0]), 0.5)
        expect = math.log(2.0) + 0.125 - 0.5
        assert abs(bl.kl_to_prior(post, bl.IsotropicPrior(1.0)).item() - expect) < 1e-12

    def test_monte_carlo_oracle(self):
        # MC estimate of E_q[ln q - ln p] with 10^6 draws
        rng = np.random.default_rng(7)
        mu, sigma, sp = 0.8, 0.6, 0.9
        post = make_posterior(np.array([mu]), sigma)
        sigma = float(post.std_values()[0])
        closed = bl.kl_to_prior(post, bl.IsotropicPrior(sp)).item()
        w = rng.normal(mu, sigma, size=1_000_000)
        ln_q = -0.5 * ((w - mu) / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))
        ln_p = -0.5 * (w / sp) ** 2 - math.log(sp * math.sqrt(2 * math.pi))
        assert abs(closed - float(np.mean(ln_q - ln_p))) < 0.01

    def test_nonnegative_over_random_parameters(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            post = bl.GaussianPosterior(
                Tensor(rng.normal(size=(3, 2)), requires_grad=True),
                Tensor(rng.normal(size=(3, 2)), requires_grad=True),
            )
            prior = bl.IsotropicPrior(rng.uniform(0.135, 1.0))
            assert bl.kl_to_prior(post, prior).item() >= 0.0

    def test_differentiable(self):
        rng = np.random.default_rng(15)
        post = bl.GaussianPosterior(
            Tensor(rng.normal(size=(2, 2)), requires_grad=True),
            Tensor(rng.normal(size=(2, 2)), requires_grad=True),
        )
        prior = bl.IsotropicPrior(0.5)
        assert_grads_close(lambda: bl.kl_to_prior(post, prior), [post.mean, post.rho])


class TestEmbeddingLookup:
    def test_deterministic_table_rows(self):
        table = Tensor(np.arange(8.0).reshape(4, 2))
        out = bl.embedding_lookup(table, [3, 1], mode="mean")
        np.testing.assert_array_equal(out.data, [[6.0, 7.0], [2.0, 3.0]])

    def test_sigma_zero_sample_equals_mean(self):
        post = bl.GaussianPosterior(
            Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True),
            Tensor(np.full((4, 2), -60.0), requires_grad=True),
        )
        sampled = bl.embedding_lookup(post, [0, 2], "sample", np.random.default_rng(1))
        mean = bl.embedding_lookup(post, [0, 2], "mean")
        np.testing.assert_allclose(sampled.data, mean.data, atol=1e-12)

    def test_repeated_id_shares_one_realization(self):
        post = make_posterior(np.zeros((5, 3)), 1.0)
        out = bl.embedding_lookup(post, [2, 2, 2], "sample", np.random.default_rng(0)).data
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])

    def test_out_of_range_id(self):
        with pytest.raises(IndexError):
            bl.embedding_lookup(Tensor(np.zeros((4, 2))), [4], mode="mean")


class TestDenseForward:
    def test_identity_weights(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = bl.dense_forward(x, Tensor(np.eye(4)), Tensor(np.zeros(4)), mode="mean")
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weights_broadcast_bias(self):
        x = Tensor(np.ones((3, 2)))
        out = bl.dense_forward(x, Tensor(np.zeros((2, 2))), Tensor([5.0, -1.0]), mode="mean")
        np.testing.assert_array_equal(out.data, [[5.0, -1.0]] * 3)

    def test_gradient_random_shapes(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2,)), requires_grad=True)

        def build():
            out = bl.dense_forward(x, w, b, mode="mean")
            return nc.reduce_sum(nc.mul(out, out))

        assert_grads_close(build, [x, w, b])


class TestLSTMStep:
    def test_zero_weights_closed_form(self):
        rng = np.random.default_rng(2)
        h_dim = 4
        x = Tensor(rng.normal(size=(3, 5)))
        h0 = Tensor(np.zeros((3, h_dim)))
        c0 = Tensor(rng.normal(size=(3, h_dim)))
        wx = Tensor(np.zeros((5, 4 * h_dim)))
        wh = Tensor(np.zeros((h_dim, 4 * h_dim)))
        b = Tensor(np.zeros(4 * h_dim))
        h, c = bl.lstm_step(x, h0, c0, wx, wh, b)
        np.testing.assert_allclose(c.data, 0.5 * c0.data, atol=1e-15)
        np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0.data), atol=1e-15)

    def test_all_zero_everything_gives_zero_hidden(self):
        z = Tensor(np.zeros((2, 3)))
        h0 = c0 = Tensor(np.zeros((2, 2)))
        h, c = bl.lstm_step(z, h0, c0, Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(c.data, 0.0)

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(5)
        h, c = bl.lstm_step(
            Tensor(rng.normal(scale=10, size=(4, 3))),
            Tensor(rng.normal(scale=10, size=(4, 6))),
            Tensor(rng.normal(scale=10, size=(4, 6))),
            Tensor(rng.normal(size=(3, 24))),
            Tensor(rng.normal(size=(6, 24))),
            Tensor(rng.normal(size=(24,))),
        )
        assert np.all(np.abs(h.data) < 1.0)

    def test_three_step_unroll_gradient(self):
        rng = np.random.default_rng(6)
        h_dim = 3
        xs = [Tensor(rng.normal(size=(2, 2)), requires_grad=True) for _ in range(3)]
        wx = Tensor(rng.normal(size=(2, 4 * h_dim)), requires_grad=True)
        wh = Tensor(rng.normal(size=(h_dim, 4 * h_dim)), requires_grad=True)
        b = Tensor(rng.normal(size=(4 * h_dim,)), requires_grad=True)

        def build():
            h = Tensor(np.zeros((2, h_dim)))
            c = Tensor(np.zeros((2, h_dim)))
            for x in xs:
                h, c = bl.lstm_step(x, h, c, wx, wh, b)
            return nc.reduce_sum(nc.mul(h, h))

        assert_grads_close(build, [wx, wh, b] + xs, rel_tol=1e-4)


class TestEmbeddingEntropy:
    def test_unit_sigma_1d(self):
        post = make_posterior(np.zeros((3, 1)), 1.0)
        assert abs(bl.embedding_entropy(post, 0) - 0.5 * bl.LOG_TWO_PI_E) < 1e-12

    def test_additivity_2d(self):
        post = make_posterior(np.zeros((3, 2)), 1.0)
        assert abs(bl.embedding_entropy(post, 1) - bl.LOG_TWO_PI_E) < 1e-12

    def test_halving_one_sigma_drops_ln2(self):
        hi = make_posterior(np.zeros((1, 3)), 1.0)
        lo_sigma = np.array([[1.0, 1.0, 0.5]])
        lo = bl.GaussianPosterior(
            Tensor(np.zeros((1, 3)), requires_grad=True),
            Tensor(np.log(np.expm1(lo_sigma)), requires_grad=True),
        )
        drop = bl.embedding_entropy(hi, 0) - bl.embedding_entropy(lo, 0)
        assert abs(drop - math.log(2.0)) < 1e-12

    def test_monotone_in_sigma(self):
        rng = np.random.default_rng(10)
        sigma = rng.uniform(0.2, 1.0, size=(1, 4))
        base = bl.GaussianPosterior(
            Tensor(np.zeros((1, 4)), requires_grad=True),
            Tensor(np.log(np.expm1(sigma)), requires_grad=True),
        )
        for j in range(4):
            wider_sigma = sigma.copy()
            wider_sigma[0, j] *= 1.3
            wider = bl.GaussianPosterior(
                Tensor(np.zeros((1, 4)), requires_grad=True),
                Tensor(np.log(np.expm1(wider_sigma)), requires_grad=True),
            )
            assert bl.embedding_entropy(wider, 0) > bl.embedding_entropy(base, 0)

    def test_matches_monte_carlo_entropy(self):
        rng = np.random.default_rng(11)
        sigma = rng.uniform(0.3, 1.2, size=(1, 4))
        mu = rng.normal(size=(1, 4))
        post = bl.GaussianPosterior(
            Tensor(mu, requires_grad=True),
            Tensor(np.log(np.expm1(sigma)), requires_grad=True),
        )
        sigma = post.std_values()[0]
        draws = rng.normal(mu[0], sigma, size=(100_000, 4))
        log_density = (
            -0.5 * (((draws - mu[0]) / sigma) ** 2).sum(axis=1)
            - np.log(sigma).sum()
            - 2.0 * math.log(2 * math.pi)
        )
        assert abs(bl.embedding_entropy(post, 0) - (-log_density.mean())) < 0.05

    def test_out_of_range_row(self):
        post = make_posterior(np.zeros((2, 2)), 1.0)
        with pytest.raises(IndexError):
            bl.embedding_entropy(post, 2)


class TestStochasticityConfig:
    def test_named_variants_map_exactly(self):
        cases = {
            "deterministic": (False, False, False, False),
            "bayesian-embeddings": (True, False, False, False),
            "bayesian-output": (False, False, False, True),
            "bayesian-hidden-output": (False, False, True, True),
            "bayesian-rnn-hidden-output": (False, True, True, True),
            "fully-bayesian": (True, True, True, True),
        }
        for name, flags in cases.items():
            cfg = bl.StochasticityConfig.from_variant(name)
            assert (cfg.embeddings, cfg.rnn, cfg.hidden, cfg.output) == flags
            assert cfg.variant_name() == name

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            bl.StochasticityConfig.from_variant("bayesian-everything")


class TestLayers:
    def test_deterministic_layer_has_no_posteriors(self):
        rng = np.random.default_rng(0)
        layer = bl.DenseLayer("out", 4, 2, False, False, bl.IsotropicPrior(0.3), rng)
        assert layer.posteriors() == {}
        assert set(layer.parameters()) == {"out.weight", "out.bias"}

    def test_stochastic_layer_exposes_mu_rho(self):
        rng = np.random.default_rng(0)
        layer = bl.DenseLayer("out", 4, 2, True, True, bl.IsotropicPrior(0.3), rng)
        assert set(layer.parameters()) == {
            "out.weight.mu",
            "out.weight.rho",
            "out.bias.mu",
            "out.bias.rho",
        }
        assert set(layer.posteriors()) == {"out.weight", "out.bias"}

    def test_bias_stays_deterministic_without_bias_uncertainty(self):
        rng = np.random.default_rng(0)
        layer = bl.LSTMLayer("rnn0", 3, 4, True, False, bl.IsotropicPrior(0.3), rng)
        assert isinstance(layer.bias, nc.Tensor)
        assert set(layer.posteriors()) == {"rnn0.wx", "rnn0.wh"}

    def test_posterior_init_width_tracks_prior(self):
        rng = np.random.default_rng(0)
        prior = bl.IsotropicPrior(0.5)
        layer = bl.EmbeddingLayer("emb", 10, 4, True, prior, rng)
        np.testing.assert_allclose(layer.table.std_values(), 0.05, rtol=1e-10)
