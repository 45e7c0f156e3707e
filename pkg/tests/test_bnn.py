import math

import numpy as np
import pytest
from scipy import stats

from oracles import central_diff, gaussian_kl_quad, max_rel_err, mc_gaussian_entropy, mlp_loop_forward
from vase import bnn
from vase.bnn import (
    BnnError,
    LikelihoodSpec,
    MiniBatch,
    PriorSpec,
    VariationalPosterior,
    elbo,
    elbo_and_grad,
    elbo_update,
    kl_between_posteriors,
    kl_to_prior,
    posterior_entropy,
    predict_next_state,
    sample_parameters,
    state_log_likelihood,
)
from vase.numkit import DimensionError, MlpSpec, Rng, inverse_softplus, mlp_forward

HALF_LOG_2PI_E = 0.5 * math.log(2 * math.pi * math.e)


def posterior(mu, sigma, sizes=None):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sizes = sizes or (1, len(mu) - 1) if len(mu) > 1 else None
    spec = MlpSpec(sizes) if sizes else _spec_with(len(mu))
    rho = inverse_softplus(np.broadcast_to(np.asarray(sigma, dtype=float), mu.shape))
    return VariationalPosterior(spec, mu, rho)


def _spec_with(n):
    # any MLP with exactly n parameters: (n-1 inputs) -> 1 output has n params
    return MlpSpec((n - 1, 1)) if n >= 2 else None


def one_param(mu, sigma):
    """A posterior over a single weight: the bias-free view uses spec (1,1) and pins the bias."""
    return VariationalPosterior(MlpSpec((1, 1)), [mu, 0.0], [float(inverse_softplus(sigma)), -40.0])


def small_post(seed=0, sizes=(3, 4, 2), act="tanh"):
    rng = Rng(seed)
    spec = MlpSpec(sizes, act)
    return VariationalPosterior(spec, 0.5 * rng.normal(spec.n_params), rng.uniform(-3, 0, spec.n_params))


class TestSampling:
    def test_degenerate_posterior_returns_mean(self):
        post = small_post()
        post.rho[:] = -40.0
        thetas = sample_parameters(post, Rng(1), 5)
        assert np.max(np.abs(thetas - post.mu)) < 1e-12

    def test_standard_normal_mean(self):
        spec = MlpSpec((2, 1))
        post = VariationalPosterior(spec, np.zeros(3), np.full(3, inverse_softplus(1.0)))
        thetas = sample_parameters(post, Rng(2), 10**5)
        assert np.max(np.abs(thetas.mean(axis=0))) < 0.02

    def test_ten_samples_shape(self):
        post = small_post()
        assert sample_parameters(post, Rng(0), 10).shape == (10, post.n_params)

    def test_pure_function_of_rng_state(self):
        post = small_post()
        a = sample_parameters(post, Rng(4), 3)
        b = sample_parameters(post.copy(), Rng(4), 3)
        np.testing.assert_array_equal(a, b)

    def test_rejects_zero_samples(self):
        with pytest.raises(BnnError):
            sample_parameters(small_post(), Rng(0), 0)


class TestPrediction:
    def test_zero_weights_predict_zero(self):
        post = small_post(sizes=(3, 4, 2))
        assert not np.any(predict_next_state(post, np.zeros(post.n_params), [1.0, 2.0], [3.0]))

    def test_matches_forward_on_concatenation(self):
        post = small_post()
        theta = post.mu
        np.testing.assert_array_equal(
            predict_next_state(post, theta, [0.1, 0.2], [0.3]), mlp_forward(post.spec, theta, [0.1, 0.2, 0.3])
        )

    def test_matches_loop_oracle(self):
        post = small_post(sizes=(3, 5, 2), act="relu")
        theta = sample_parameters(post, Rng(9), 1)[0]
        expected = mlp_loop_forward((3, 5, 2), "relu", theta, [0.4, -0.7, 0.2])
        np.testing.assert_allclose(predict_next_state(post, theta, [0.4, -0.7], [0.2]), expected, atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            predict_next_state(small_post(), small_post().mu, [1.0], [1.0])


class TestLikelihood:
    def test_perfect_prediction_sigma_5(self):
        val = state_log_likelihood([1.0, 2.0], [1.0, 2.0], LikelihoodSpec(5.0))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi * 25), abs=1e-12)
        assert val == pytest.approx(-2.5284, abs=1e-4)

    def test_penalty_quadruples_when_error_doubles(self):
        lik = LikelihoodSpec(5.0)
        base = state_log_likelihood([0.0, 0.0], [0.0, 0.0], lik)
        p1 = state_log_likelihood([0.3, -0.1], [0.0, 0.0], lik) - base
        p2 = state_log_likelihood([0.6, -0.2], [0.0, 0.0], lik) - base
        assert p2 == pytest.approx(4 * p1, rel=1e-12)

    def test_wide_likelihood_leaves_only_normaliser(self):
        lik = LikelihoodSpec(1e8)
        val = state_log_likelihood([3.0], [0.0], lik)
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi * 1e16), abs=1e-12)

    def test_per_dimension_variant(self):
        lik = LikelihoodSpec(2.0, per_dimension=True)
        val = state_log_likelihood([0.5, 1.0, 0.0], [0.0, 0.0, 0.0], lik)
        expected = stats.norm.logpdf([0.5, 1.0, 0.0], 0.0, 2.0).sum()
        assert val == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            state_log_likelihood([0.0], [0.0, 1.0], LikelihoodSpec())


class TestEntropy:
    def test_unit_sigma_matches_monte_carlo(self):
        post = one_param(0.0, 1.0)
        # subtract the pinned bias coordinate
        h = posterior_entropy(post) - 0.5 * math.log(2 * math.pi * math.e * bnn.softplus(-40.0) ** 2)
        mc = mc_gaussian_entropy(1.0, 10**6, np.random.default_rng(0))
        assert abs(h - mc) < 1e-2
        assert h == pytest.approx(HALF_LOG_2PI_E, abs=1e-12)

    def test_additive_over_parameters(self):
        spec = MlpSpec((4, 1))
        post = VariationalPosterior(spec, np.zeros(5), np.full(5, inverse_softplus(1.0)))
        assert posterior_entropy(post) == pytest.approx(5 * HALF_LOG_2PI_E, rel=1e-12)

    def test_halving_sigma_costs_log2(self):
        post = small_post()
        other = post.copy()
        other.rho[3] = inverse_softplus(0.5 * bnn.softplus(post.rho[3]))
        assert posterior_entropy(post) - posterior_entropy(other) == pytest.approx(math.log(2), abs=1e-9)

    def test_permutation_and_sign_invariance(self):
        post = small_post()
        perm = Rng(1).integers(0, post.n_params, post.n_params).argsort()
        flipped = VariationalPosterior(post.spec, -post.mu[perm], post.rho[perm])
        assert posterior_entropy(flipped) == pytest.approx(posterior_entropy(post), rel=1e-13)


class TestKl:
    def test_prior_itself(self):
        spec = MlpSpec((2, 1))
        post = VariationalPosterior(spec, np.zeros(3), np.full(3, inverse_softplus(0.5)))
        assert abs(kl_to_prior(post, PriorSpec(0.5))) < 1e-12

    def test_mean_shift_of_one_prior_sigma(self):
        # single free coordinate; pin the other at the prior too
        spec = MlpSpec((1, 1))
        post = VariationalPosterior(spec, [0.5, 0.0], np.full(2, inverse_softplus(0.5)))
        assert kl_to_prior(post, PriorSpec(0.5)) == pytest.approx(0.5, abs=1e-12)

    def test_double_width_against_quadrature(self):
        sm = 0.5
        spec = MlpSpec((1, 1))
        post = VariationalPosterior(spec, [0.0, 0.0], [inverse_softplus(2 * sm), inverse_softplus(sm)])
        assert kl_to_prior(post, PriorSpec(sm)) == pytest.approx(gaussian_kl_quad(0, 2 * sm, 0, sm), abs=1e-6)

    def test_random_to_prior_against_quadrature(self):
        rng = Rng(3)
        for _ in range(5):
            mu, sig, sm = rng.normal(), rng.uniform(0.05, 2.0), rng.uniform(0.1, 2.0)
            spec = MlpSpec((1, 1))
            post = VariationalPosterior(spec, [mu, 0.0], [inverse_softplus(sig), inverse_softplus(sm)])
            assert kl_to_prior(post, PriorSpec(sm)) == pytest.approx(gaussian_kl_quad(mu, sig, 0.0, sm), abs=1e-6)

    def test_between_identical(self):
        post = small_post()
        assert kl_between_posteriors(post, post.copy()) == 0.0

    def test_between_unit_mean_shift(self):
        spec = MlpSpec((1, 1))
        r1 = inverse_softplus(1.0)
        p = VariationalPosterior(spec, [1.0, 0.0], [r1, r1])
        q = VariationalPosterior(spec, [0.0, 0.0], [r1, r1])
        assert kl_between_posteriors(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_between_random_against_quadrature(self):
        rng = Rng(8)
        spec = MlpSpec((1, 1))
        for _ in range(5):
            mp, mq = rng.normal(size=2)
            sp, sq = rng.uniform(0.1, 2.0, 2)
            r = inverse_softplus(1.0)
            p = VariationalPosterior(spec, [mp, 0.0], [inverse_softplus(sp), r])
            q = VariationalPosterior(spec, [mq, 0.0], [inverse_softplus(sq), r])
            assert kl_between_posteriors(p, q) == pytest.approx(gaussian_kl_quad(mp, sp, mq, sq), abs=1e-6)

    def test_spec_mismatch(self):
        with pytest.raises(BnnError):
            kl_between_posteriors(small_post(sizes=(3, 4, 2)), small_post(sizes=(3, 5, 2)))

    def test_nonnegative_and_zero_iff_equal(self):
        rng = Rng(12)
        for _ in range(50):
            p, q = small_post(int(rng.integers(0, 1000))), small_post(int(rng.integers(0, 1000)))
            assert kl_between_posteriors(p, q) > 0
            assert kl_to_prior(p, PriorSpec(rng.uniform(0.1, 2))) >= 0


def linear_batch(n=64, seed=0):
    rng = Rng(seed)
    s = rng.uniform(-1, 1, (n, 2))
    a = rng.uniform(-1, 1, (n, 1))
    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    B = np.array([[0.3, -0.5]])
    return MiniBatch.from_transitions(s, a, s @ A.T + a @ B)


class TestElbo:
    def test_exact_model_tiny_sigma_wide_prior(self):
        # zero-weight network with sigma -> 0 predicts targets of zero exactly
        spec = MlpSpec((2, 3, 1), "relu")
        post = VariationalPosterior(spec, np.zeros(spec.n_params), np.full(spec.n_params, -30.0))
        batch = MiniBatch(np.ones((4, 2)), np.zeros((4, 1)))
        lik = LikelihoodSpec(5.0)
        val = elbo(post, batch, PriorSpec(1e6), lik, Rng(0), n_samples=3)
        ll_only = 4 * (-0.5 * math.log(2 * math.pi * 25))
        kl = kl_to_prior(post, PriorSpec(1e6))
        assert val == pytest.approx(ll_only - kl, rel=1e-12)
        assert val - (-kl) == pytest.approx(ll_only, abs=1e-9)

    def test_duplicate_transition_adds_its_loglik(self):
        post = small_post(sizes=(3, 4, 2))
        batch = linear_batch(5)
        dup = MiniBatch(np.vstack([batch.inputs, batch.inputs[:1]]), np.vstack([batch.targets, batch.targets[:1]]))
        eps = Rng(1).normal((4, post.n_params))
        lik, prior = LikelihoodSpec(1.0), PriorSpec(0.5)
        v1, _, _ = elbo_and_grad(post, batch, prior, lik, eps)
        v2, _, _ = elbo_and_grad(post, dup, prior, lik, eps)
        thetas = post.mu + post.sigma * eps
        extra = np.mean(
            [state_log_likelihood(mlp_forward(post.spec, t, batch.inputs[0]), batch.targets[0], lik) for t in thetas]
        )
        assert v2 - v1 == pytest.approx(extra, abs=1e-10)

    @pytest.mark.parametrize("kl_weight", [1.0, 0.05])
    def test_gradient_matches_finite_differences(self, kl_weight):
        post = small_post(sizes=(3, 4, 2))
        batch = linear_batch(8)
        eps = Rng(5).normal((2, post.n_params))
        lik, prior = LikelihoodSpec(0.7), PriorSpec(0.5)
        _, g_mu, g_rho = elbo_and_grad(post, batch, prior, lik, eps, kl_weight)
        n = post.n_params

        def f(flat):
            p = VariationalPosterior(post.spec, flat[:n], flat[n:])
            return elbo_and_grad(p, batch, prior, lik, eps, kl_weight)[0]

        fd = central_diff(f, np.concatenate([post.mu, post.rho]))
        assert max_rel_err(np.concatenate([g_mu, g_rho]), fd) < 1e-4

    def test_empty_batch_rejected(self):
        with pytest.raises(BnnError):
            MiniBatch(np.zeros((0, 3)), np.zeros((0, 2)))

    def test_lower_bound_on_conjugate_linear_gaussian(self):
        """1-input linear model: the exact evidence is a multivariate normal density."""
        spec = MlpSpec((1, 1))
        rng = Rng(21)
        x = rng.uniform(-2, 2, 20)
        y = 0.7 * x - 0.2 + 0.3 * rng.normal(20)
        sm, sc = 1.0, 0.3
        cov = sm**2 * (np.outer(x, x) + 1.0) + sc**2 * np.eye(20)
        log_evidence = stats.multivariate_normal.logpdf(y, np.zeros(20), cov)
        batch = MiniBatch(x[:, None], y[:, None])
        prior, lik = PriorSpec(sm), LikelihoodSpec(sc)
        # several posteriors, including one near the exact Gaussian posterior
        prec = np.linalg.inv(np.eye(2) / sm**2 + np.c_[x, np.ones(20)].T @ np.c_[x, np.ones(20)] / sc**2)
        mean = prec @ (np.c_[x, np.ones(20)].T @ y) / sc**2
        candidates = [
            VariationalPosterior(spec, mean, inverse_softplus(np.sqrt(np.diag(prec)))),
            VariationalPosterior(spec, [0.0, 0.0], inverse_softplus(np.array([1.0, 1.0]))),
            VariationalPosterior(spec, [1.0, 0.5], inverse_softplus(np.array([0.1, 0.2]))),
        ]
        for post in candidates:
            vals = np.array([elbo(post, batch, prior, lik, Rng(k), n_samples=1) for k in range(2000)])
            se = vals.std(ddof=1) / math.sqrt(len(vals))
            assert vals.mean() - 3 * se <= log_evidence


class TestElboUpdate:
    def test_stationary_point_leaves_posterior(self):
        spec = MlpSpec((2, 1))
        sm = 0.5
        post = VariationalPosterior(spec, np.zeros(3), np.full(3, inverse_softplus(sm)))
        batch = MiniBatch(np.ones((3, 2)), np.zeros((3, 1)))
        # likelihood flat (huge width) and KL at its minimum
        new = elbo_update(post, batch, PriorSpec(sm), LikelihoodSpec(1e150), Rng(0), 1e-3, bnn.new_moments(post))
        np.testing.assert_allclose(new.mu, post.mu, atol=1e-9)
        np.testing.assert_allclose(new.rho, post.rho, atol=1e-9)

    def test_kl_alone_pulls_mean_to_zero(self):
        spec = MlpSpec((2, 1))
        post = VariationalPosterior(spec, [1.0, -2.0, 0.5], np.full(3, inverse_softplus(0.1)))
        batch = MiniBatch(np.zeros((1, 2)), np.zeros((1, 1)))
        moments = bnn.new_moments(post)
        rng = Rng(3)
        prev = np.abs(post.mu).sum()
        for _ in range(50):
            post = elbo_update(post, batch, PriorSpec(0.5), LikelihoodSpec(1e150), rng, 1e-2, moments)
            cur = np.abs(post.mu).sum()
            assert cur < prev
            prev = cur

    def test_fits_linear_dynamics(self):
        spec = bnn.model_spec(2, 1, (32,), "relu")
        prior = PriorSpec(0.5)
        rng = Rng(0)
        post = VariationalPosterior.initial(spec, prior, rng)
        data = linear_batch(1000, seed=1)
        moments = bnn.new_moments(post)
        # noise-free generator: a sharp likelihood, otherwise the KL keeps sigma near the prior
        lik = LikelihoodSpec(0.05)
        for _ in range(2000):
            idx = rng.integers(0, 1000, 32)
            post = elbo_update(
                post, MiniBatch(data.inputs[idx], data.targets[idx]), prior, lik, rng, 1e-3, moments, pool_size=1000
            )
        held_out = linear_batch(200, seed=2)
        pred = mlp_forward(spec, post.mu, held_out.inputs)
        err = np.linalg.norm(pred - held_out.targets, axis=1).mean()
        assert err < 0.05


def test_checkpoint_round_trip(tmp_path):
    post = small_post()
    prior, lik = PriorSpec(0.37), LikelihoodSpec(4.2, per_dimension=True)
    bnn.save_posterior(tmp_path / "p.json", post, prior, lik)
    p2, prior2, lik2 = bnn.load_posterior(tmp_path / "p.json")
    assert p2.spec == post.spec and prior2 == prior and lik2 == lik
    assert p2.mu.tobytes() == post.mu.tobytes()
    assert p2.rho.tobytes() == post.rho.tobytes()
