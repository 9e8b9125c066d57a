"""
Likelihood heads shared by the structural-equation models: log-likelihoods and their gradients
"""
from typing import Dict, Tuple

import numpy as np
from scipy.special import expit

from src.utils.config import get_settings
from src.utils.gaussian import (
    DiagGaussian,
    log_density_bernoulli,
    log_density_binomial,
    log_density_gaussian,
)

LIKELIHOODS = ("gaussian", "bernoulli", "binomial3")
BINOMIAL_TRIALS = 3


def head_layout(kind: str, dim: int) -> Dict[str, int]:
    """Named output heads a decoder of this likelihood needs"""
    if kind == "gaussian":
        return {"mean": dim, "log_variance": dim}
    if kind in ("bernoulli", "binomial3"):
        return {"logit": dim}
    raise ValueError(f"unknown likelihood '{kind}', expected one of {LIKELIHOODS}")


def clamped_probability(logit: np.ndarray, clamp: float = None) -> Tuple[np.ndarray, np.ndarray]:
    """sigmoid(logit) clipped to [c, 1−c]; also returns the mask where the clip is inactive"""
    clamp = get_settings().prob_clamp if clamp is None else clamp
    p = expit(logit)
    active = (p > clamp) & (p < 1.0 - clamp)
    return np.clip(p, clamp, 1.0 - clamp), active


def gaussian_loglik(x, mean, log_variance, floor: float = None):
    """Per-row Gaussian log-likelihood with gradients w.r.t. mean and log-variance"""
    floor = get_settings().variance_floor if floor is None else floor
    raw = np.exp(log_variance)
    variance = np.maximum(raw, floor)
    ll = log_density_gaussian(x, DiagGaussian(mean, variance))
    resid = x - mean
    d_mean = resid / variance
    d_logvar = (-0.5 + 0.5 * resid ** 2 / variance) * (raw > floor)
    return ll, d_mean, d_logvar


def fixed_variance_gaussian_loglik(y, mean, variance: float):
    """Outcome head with fixed variance v̂: per-row log-likelihood and gradient w.r.t. mean"""
    ll = log_density_gaussian(y, DiagGaussian(mean, np.full_like(mean, variance)))
    return ll, (y - mean) / variance


def bernoulli_loglik(k, logit, clamp: float = None):
    p, active = clamped_probability(logit, clamp)
    ll = np.sum(log_density_bernoulli(k, p), axis=-1)
    return ll, (k - p) * active


def binomial_loglik(k, logit, n: int = BINOMIAL_TRIALS, clamp: float = None):
    p, active = clamped_probability(logit, clamp)
    ll = np.sum(log_density_binomial(k, n, p), axis=-1)
    return ll, (k - n * p) * active


def decoder_loglik(kind: str, x: np.ndarray, outputs: Dict[str, np.ndarray]):
    """
    Log-likelihood of rows `x` under a decoder's outputs

    Returns:
        (per-row log-likelihood, gradient dict keyed like the decoder heads)
    """
    if kind == "gaussian":
        ll, d_mean, d_logvar = gaussian_loglik(x, outputs["mean"], outputs["log_variance"])
        return ll, {"mean": d_mean, "log_variance": d_logvar}
    if kind == "bernoulli":
        ll, d_logit = bernoulli_loglik(x, outputs["logit"])
        return ll, {"logit": d_logit}
    if kind == "binomial3":
        ll, d_logit = binomial_loglik(x, outputs["logit"])
        return ll, {"logit": d_logit}
    raise ValueError(f"unknown likelihood '{kind}'")


def decoder_mean(kind: str, outputs: Dict[str, np.ndarray]) -> np.ndarray:
    """Expected value of the decoded variable"""
    if kind == "gaussian":
        return outputs["mean"]
    p, _ = clamped_probability(outputs["logit"])
    return BINOMIAL_TRIALS * p if kind == "binomial3" else p


def decoder_sample(kind: str, outputs: Dict[str, np.ndarray], rng) -> np.ndarray:
    if kind == "gaussian":
        std = np.sqrt(np.maximum(np.exp(outputs["log_variance"]), get_settings().variance_floor))
        return outputs["mean"] + std * rng.normal(outputs["mean"].shape)
    p, _ = clamped_probability(outputs["logit"])
    if kind == "binomial3":
        return rng.binomial(BINOMIAL_TRIALS, p).astype(float)
    return rng.bernoulli(p).astype(float)


def scale_upstream(upstream: Dict[str, np.ndarray], weights: np.ndarray) -> Dict[str, np.ndarray]:
    """Multiply each head gradient row-wise (e.g. by −1/batch, or a row mask)"""
    return {name: g * weights[:, None] for name, g in upstream.items()}


def outcome_layout(kind: str) -> Dict[str, int]:
    """Outcome head: Gaussian mean with fixed variance v̂, or a Bernoulli logit"""
    if kind == "gaussian":
        return {"mean": 1}
    if kind == "bernoulli":
        return {"logit": 1}
    raise ValueError(f"unknown outcome likelihood '{kind}'")


def outcome_loglik(kind: str, y: np.ndarray, outputs: Dict[str, np.ndarray], variance: float):
    """Per-row log p(y|·) and the gradient dict for the outcome head"""
    if kind == "gaussian":
        ll, d_mean = fixed_variance_gaussian_loglik(y[:, None], outputs["mean"], variance)
        return ll, {"mean": d_mean}
    ll, d_logit = bernoulli_loglik(y[:, None], outputs["logit"])
    return ll, {"logit": d_logit}


def outcome_mean(kind: str, outputs: Dict[str, np.ndarray]) -> np.ndarray:
    if kind == "gaussian":
        return outputs["mean"][:, 0]
    p, _ = clamped_probability(outputs["logit"][:, 0])
    return p


def treatment_loglik(t: np.ndarray, outputs: Dict[str, np.ndarray]):
    return bernoulli_loglik(t[:, None], outputs["logit"])
