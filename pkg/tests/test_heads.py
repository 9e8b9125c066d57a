"""
Tests for likelihood heads and their gradients
"""
import numpy as np
import pytest
from scipy import stats

from src.services.heads import (
    BINOMIAL_TRIALS,
    binomial_loglik,
    clamped_probability,
    decoder_loglik,
    decoder_mean,
    gaussian_loglik,
    head_layout,
    outcome_layout,
    outcome_loglik,
)
from src.utils.rng import RngStream


def _numeric(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (np.sum(fn(up)) - np.sum(fn(down))) / (2 * h)
    return grad


class TestLayouts:
    def test_gaussian_decoder_has_two_heads(self):
        assert head_layout("gaussian", 3) == {"mean": 3, "log_variance": 3}

    def test_discrete_decoders_have_logits(self):
        assert head_layout("binomial3", 4) == {"logit": 4}

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            head_layout("poisson", 2)
        with pytest.raises(ValueError):
            outcome_layout("binomial3")


class TestClamp:
    def test_extreme_logits_are_clamped(self):
        p, active = clamped_probability(np.array([-50.0, 0.0, 50.0]), clamp=1e-3)
        np.testing.assert_allclose(p, [1e-3, 0.5, 1 - 1e-3])
        np.testing.assert_array_equal(active, [False, True, False])


class TestGradients:
    def test_gaussian_gradients(self):
        rng = RngStream(0)
        x, mean, logvar = rng.normal((4, 2)), rng.normal((4, 2)), 0.3 * rng.normal((4, 2))
        ll, d_mean, d_logvar = gaussian_loglik(x, mean, logvar)
        expected = stats.norm.logpdf(x, mean, np.exp(0.5 * logvar)).sum(axis=1)
        np.testing.assert_allclose(ll, expected, rtol=1e-10)
        np.testing.assert_allclose(d_mean, _numeric(lambda m: gaussian_loglik(x, m, logvar)[0], mean), rtol=1e-5)
        np.testing.assert_allclose(d_logvar, _numeric(lambda v: gaussian_loglik(x, mean, v)[0], logvar), rtol=1e-5, atol=1e-8)

    def test_bernoulli_gradient_is_residual(self):
        k = np.array([[1.0, 0.0, 1.0]])
        logit = np.array([[0.3, -1.2, 2.0]])
        ll, grads = decoder_loglik("bernoulli", k, {"logit": logit})
        p = 1.0 / (1.0 + np.exp(-logit))
        np.testing.assert_allclose(grads["logit"], k - p, rtol=1e-12)
        np.testing.assert_allclose(ll, stats.bernoulli.logpmf(k, p).sum(axis=1), rtol=1e-12)

    def test_binomial_gradient(self):
        k = np.array([[0.0, 2.0, 3.0]])
        logit = np.array([[0.1, -0.4, 1.5]])
        _, d_logit = binomial_loglik(k, logit)
        np.testing.assert_allclose(d_logit, _numeric(lambda l: binomial_loglik(k, l)[0], logit), rtol=1e-5)

    def test_outcome_gaussian_uses_fixed_variance(self):
        y = np.array([1.0, -0.5])
        ll, grads = outcome_loglik("gaussian", y, {"mean": np.zeros((2, 1))}, variance=2.0)
        np.testing.assert_allclose(ll, stats.norm.logpdf(y, 0.0, np.sqrt(2.0)), rtol=1e-12)
        np.testing.assert_allclose(grads["mean"][:, 0], y / 2.0)

    def test_binomial_mean(self):
        mean = decoder_mean("binomial3", {"logit": np.zeros((1, 2))})
        np.testing.assert_allclose(mean, np.full((1, 2), BINOMIAL_TRIALS * 0.5))
