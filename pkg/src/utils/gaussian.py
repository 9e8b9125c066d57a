"""
Diagonal-Gaussian probability machinery: densities, KL, sampling, product of experts
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from src.utils.config import get_settings
from src.utils.errors import DimensionError, DomainError
from src.utils.rng import RngStream

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DiagGaussian:
    """Mean/variance pair; trailing axis is the latent dimension, leading axes batch"""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        variance = np.asarray(self.variance, dtype=float)
        if mean.shape != variance.shape:
            raise DimensionError(
                f"mean shape {mean.shape} does not match variance shape {variance.shape}"
            )
        if not np.all(variance > 0):
            raise DomainError("variance must be strictly positive")
        mean.setflags(write=False)
        variance.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def precision(self) -> np.ndarray:
        return 1.0 / self.variance

    @classmethod
    def standard(cls, dim: int, batch: Tuple[int, ...] = ()) -> "DiagGaussian":
        shape = tuple(batch) + (dim,)
        return cls(np.zeros(shape), np.ones(shape))

    @classmethod
    def from_log_variance(cls, mean, log_variance, floor: float = None) -> "DiagGaussian":
        floor = get_settings().variance_floor if floor is None else floor
        return cls(mean, np.maximum(np.exp(log_variance), floor))


def log_density_gaussian(x, g: DiagGaussian) -> float:
    """Σ_i −½log(2π v_i) − (x_i − μ_i)²/(2 v_i), summed over the trailing axis"""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != g.mean.shape[-1:]:
        raise DimensionError(f"x has length {x.shape[-1:]}, gaussian has {g.dim}")
    quad = (x - g.mean) ** 2 / g.variance
    return np.sum(-0.5 * (LOG_2PI + np.log(g.variance)) - 0.5 * quad, axis=-1)


def log_density_bernoulli(k, p):
    k = np.asarray(k, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("bernoulli probability must lie in (0, 1); clamp head outputs first")
    if np.any((k != 0) & (k != 1)):
        raise DomainError("bernoulli outcome must be 0 or 1")
    return k * np.log(p) + (1.0 - k) * np.log1p(-p)


def log_density_binomial(k, n: int, p):
    k = np.asarray(k, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any((k < 0) | (k > n)):
        raise DomainError(f"binomial count must lie in [0, {n}]")
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("binomial probability must lie in (0, 1)")
    log_choose = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    return log_choose + k * np.log(p) + (n - k) * np.log1p(-p)


def kl_to_standard_normal(g: DiagGaussian):
    """KL(g ‖ N(0, I)), summed over the trailing axis"""
    return 0.5 * np.sum(g.variance + g.mean ** 2 - 1.0 - np.log(g.variance), axis=-1)


def reparam_sample(
    g: DiagGaussian, rng: RngStream, return_noise: bool = False, floor: float = None
):
    """mean + sqrt(variance) ⊙ ε, ε ~ N(0, I); differentiable in (mean, variance) for fixed ε"""
    floor = get_settings().variance_floor if floor is None else floor
    eps = rng.normal(g.mean.shape)
    sample = g.mean + np.sqrt(np.maximum(g.variance, floor)) * eps
    if return_noise:
        return sample, eps
    return sample


def poe_fuse(
    experts: Sequence[DiagGaussian], prior: Optional[DiagGaussian], floor: float = None
) -> DiagGaussian:
    """
    Product of Gaussian experts: V = (Σ T_i)⁻¹, μ = (Σ μ_i T_i)·V with T_i = 1/V_i

    Args:
        experts: per-modality factors (may be empty)
        prior: prior factor; None means an improper flat prior (used in tests only)
        floor: variance floor applied to the fused result

    Returns:
        Normalized product as a DiagGaussian
    """
    floor = get_settings().variance_floor if floor is None else floor
    factors = list(experts) + ([prior] if prior is not None else [])
    if not factors:
        raise DimensionError("poe_fuse needs at least one factor")
    shape = factors[0].mean.shape
    for factor in factors:
        if factor.mean.shape != shape:
            raise DimensionError(
                f"expert shape {factor.mean.shape} does not match {shape}"
            )
    if len(factors) == 1:
        only = factors[0]
        return DiagGaussian(only.mean, np.maximum(only.variance, floor))
    precisions = np.stack([f.precision for f in factors], axis=0)
    weighted = np.stack([f.mean * f.precision for f in factors], axis=0)
    total_precision = np.sum(precisions, axis=0)
    variance = 1.0 / total_precision
    mean = np.sum(weighted, axis=0) * variance
    return DiagGaussian(mean, np.maximum(variance, floor))
