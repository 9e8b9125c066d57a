"""
Closed-form treatment-effect identification in linear proxy structural equations
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import scipy.linalg as sla

from src.services.datagen import Dataset
from src.utils.errors import DimensionError, IdentificationError, RankError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-8


@dataclass
class LinearSem:
    """
    U ~ N(0, Σ_UU); W, Z, V = β_·U U + ε; X = β_XU·U + ε_X;
    Y = β_YU·U + β_YX X + ε_Y. Noise variances are per block (diagonal).
    """

    beta_WU: np.ndarray
    beta_ZU: np.ndarray
    beta_VU: np.ndarray
    beta_XU: np.ndarray
    beta_YU: np.ndarray
    beta_YX: float
    sigma_UU: np.ndarray
    noise_W: float = 1.0
    noise_Z: float = 1.0
    noise_V: float = 1.0
    noise_X: float = 1.0
    noise_Y: float = 1.0

    def __post_init__(self):
        self.sigma_UU = np.atleast_2d(np.asarray(self.sigma_UU, dtype=float))
        du = self.sigma_UU.shape[0]
        for name in ("beta_WU", "beta_ZU", "beta_VU"):
            matrix = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if matrix.shape[1] != du:
                raise DimensionError(f"{name} has {matrix.shape[1]} columns, Ū has dimension {du}")
            setattr(self, name, matrix)
        for name in ("beta_XU", "beta_YU"):
            row = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if row.shape != (du,):
                raise DimensionError(f"{name} must have length {du}")
            setattr(self, name, row)
        if self.sigma_UU.shape != (du, du) or not np.allclose(self.sigma_UU, self.sigma_UU.T):
            raise DimensionError("Σ_UU must be square and symmetric")
        if np.linalg.eigvalsh(self.sigma_UU).min() <= 0:
            raise DimensionError("Σ_UU must be positive definite")
        if min(self.noise_W, self.noise_Z, self.noise_V, self.noise_X, self.noise_Y) <= 0:
            raise DimensionError("noise variances must be positive")

    @property
    def dim_u(self) -> int:
        return self.sigma_UU.shape[0]

    @classmethod
    def reference(cls) -> "LinearSem":
        """Scalar sem: every β = 1, β_YX = 2, unit noises, Σ_UU = 1"""
        one = np.ones((1, 1))
        return cls(one, one, one, np.ones(1), np.ones(1), 2.0, one)

    @classmethod
    def random(cls, dim_u: int, proxy_dim: int, rng: RngStream, beta_YX: float = None) -> "LinearSem":
        """Standard-normal mechanisms; proxies of width proxy_dim for each of W, Z, V"""
        factor = rng.normal((dim_u, dim_u))
        return cls(
            beta_WU=rng.normal((proxy_dim, dim_u)),
            beta_ZU=rng.normal((proxy_dim, dim_u)),
            beta_VU=rng.normal((proxy_dim, dim_u)),
            beta_XU=rng.normal(dim_u),
            beta_YU=rng.normal(dim_u),
            beta_YX=float(rng.normal()) if beta_YX is None else beta_YX,
            sigma_UU=factor @ factor.T + dim_u * np.eye(dim_u),
        )


@dataclass
class CovSet:
    sigma_XY: float
    sigma_XX: float
    sigma_XW: np.ndarray
    sigma_YW: np.ndarray
    sigma_VW: Optional[np.ndarray] = None
    sigma_WZ: Optional[np.ndarray] = None
    sigma_VZ: Optional[np.ndarray] = None

    def __post_init__(self):
        self.sigma_XW = np.atleast_1d(np.asarray(self.sigma_XW, dtype=float)).ravel()
        self.sigma_YW = np.atleast_1d(np.asarray(self.sigma_YW, dtype=float)).ravel()
        dw = self.sigma_XW.size
        if self.sigma_YW.size != dw:
            raise DimensionError("Σ_XW and Σ_YW lengths differ")
        for name in ("sigma_VW", "sigma_WZ", "sigma_VZ"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.atleast_2d(np.asarray(value, dtype=float)))
        if self.sigma_VW is not None and self.sigma_VW.shape[1] != dw:
            raise DimensionError("Σ_VW columns must match the width of W")
        if self.sigma_WZ is not None and self.sigma_WZ.shape[0] != dw:
            raise DimensionError("Σ_WZ rows must match the width of W")

    @property
    def has_three_views(self) -> bool:
        return self.sigma_VW is not None and self.sigma_WZ is not None and self.sigma_VZ is not None


def simulate_linear_sem(sem: LinearSem, n: int, rng: RngStream, binary_treatment: bool = False) -> Dataset:
    """
    Draw n rows of the sem. With binary_treatment the treatment is
    1[β_XU·U + ε_X > 0] and enters Y in that thresholded form.
    """
    chol = np.linalg.cholesky(sem.sigma_UU)
    u = rng.normal((n, sem.dim_u)) @ chol.T
    w = u @ sem.beta_WU.T + np.sqrt(sem.noise_W) * rng.normal((n, sem.beta_WU.shape[0]))
    z = u @ sem.beta_ZU.T + np.sqrt(sem.noise_Z) * rng.normal((n, sem.beta_ZU.shape[0]))
    v = u @ sem.beta_VU.T + np.sqrt(sem.noise_V) * rng.normal((n, sem.beta_VU.shape[0]))
    x = u @ sem.beta_XU + np.sqrt(sem.noise_X) * rng.normal(n)
    if binary_treatment:
        x = (x > 0).astype(float)
    y = u @ sem.beta_YU + sem.beta_YX * x + np.sqrt(sem.noise_Y) * rng.normal(n)
    return Dataset(
        modalities={"W": w, "Z": z, "V": v},
        treatment=x,
        outcome=y,
        modality_kinds={"W": "gaussian", "Z": "gaussian", "V": "gaussian"},
        outcome_kind="gaussian",
        treatment_kind="binary" if binary_treatment else "continuous",
        metadata={"generator": "linear_sem", "n": str(n), "beta_YX": repr(sem.beta_YX)},
    )


def population_covariances(sem: LinearSem) -> CovSet:
    """Exact covariances implied by the sem (continuous treatment)"""
    s = sem.sigma_UU
    total_y = sem.beta_YU + sem.beta_YX * sem.beta_XU
    return CovSet(
        sigma_XY=float(sem.beta_XU @ s @ total_y + sem.beta_YX * sem.noise_X),
        sigma_XX=float(sem.beta_XU @ s @ sem.beta_XU + sem.noise_X),
        sigma_XW=sem.beta_XU @ s @ sem.beta_WU.T,
        sigma_YW=total_y @ s @ sem.beta_WU.T,
        sigma_VW=sem.beta_VU @ s @ sem.beta_WU.T,
        sigma_WZ=sem.beta_WU @ s @ sem.beta_ZU.T,
        sigma_VZ=sem.beta_VU @ s @ sem.beta_ZU.T,
    )


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sample cross-covariance with 1/(n−1) normalization"""
    a = np.atleast_2d(a.T).T if a.ndim == 1 else a
    b = np.atleast_2d(b.T).T if b.ndim == 1 else b
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / (a.shape[0] - 1)


def estimate_covariances(w, x, y, z=None, v=None) -> CovSet:
    w, x, y = np.asarray(w, float), np.asarray(x, float), np.asarray(y, float)
    if w.ndim == 1:
        w = w[:, None]
    if not (len(w) == len(x) == len(y)) or len(x) < 2:
        raise DimensionError("need at least two aligned rows of W, X, Y")
    cov = CovSet(
        sigma_XY=float(_cross(x, y)[0, 0]),
        sigma_XX=float(_cross(x, x)[0, 0]),
        sigma_XW=_cross(x, w)[0],
        sigma_YW=_cross(y, w)[0],
    )
    if z is not None and v is not None:
        z = np.asarray(z, float).reshape(len(x), -1)
        v = np.asarray(v, float).reshape(len(x), -1)
        cov.sigma_VW = _cross(v, w)
        cov.sigma_WZ = _cross(w, z)
        cov.sigma_VZ = _cross(v, z)
    return cov


def covariances_from_dataset(dataset: Dataset) -> CovSet:
    mods = dataset.modalities
    return estimate_covariances(mods["W"], dataset.treatment, dataset.outcome, mods.get("Z"), mods.get("V"))


def _check_rank(matrix: np.ndarray, name: str, required: int) -> float:
    """Condition number of `matrix`; RankError when its numerical rank is below `required`"""
    singular = sla.svdvals(np.atleast_2d(matrix))
    rank = int(np.sum(singular > RANK_TOLERANCE * singular[0])) if singular[0] > 0 else 0
    if rank < required:
        raise RankError(
            f"{name} has numerical rank {rank}, need {required}; the effect is not identified",
            singular_values=singular,
        )
    return float(singular[0] / singular[-1])


@dataclass
class TauEstimate:
    tau: float
    inner: np.ndarray
    condition_numbers: Dict[str, float] = field(default_factory=dict)


def _tau_from_inner(cov: CovSet, inner: np.ndarray, conditions: Dict[str, float]) -> TauEstimate:
    solve_x = np.linalg.solve(inner, cov.sigma_XW)
    solve_y = np.linalg.solve(inner, cov.sigma_YW)
    numerator = cov.sigma_XY - cov.sigma_XW @ solve_y
    denominator = cov.sigma_XX - cov.sigma_XW @ solve_x
    if abs(denominator) <= RANK_TOLERANCE * max(abs(cov.sigma_XX), 1.0):
        raise IdentificationError(
            "treatment has no variation left after adjusting for the confounder", conditions
        )
    return TauEstimate(float(numerator / denominator), inner, conditions)


def tau_with_external_info(cov: CovSet, beta_WU, sigma_UU, return_diagnostics: bool = False):
    """
    τ = (σ_XY − Σ_XW B⁻¹ Σ_YWᵀ) / (σ_XX − Σ_XW B⁻¹ Σ_XWᵀ) with B = β_WU Σ_UU β_WUᵀ.

    β_WU must be square; reduce wider proxies with reduce_proxy first.
    """
    beta = np.atleast_2d(np.asarray(beta_WU, dtype=float))
    sigma_uu = np.atleast_2d(np.asarray(sigma_UU, dtype=float))
    if beta.shape[0] != beta.shape[1]:
        raise DimensionError(f"β_WU is {beta.shape}; reduce the proxy to dim(Ū) rows first")
    if beta.shape[0] != cov.sigma_XW.size:
        raise DimensionError("β_WU rows must match the width of W")
    conditions = {"beta_WU": _check_rank(beta, "β_WU", sigma_uu.shape[0])}
    inner = beta @ sigma_uu @ beta.T
    conditions["B"] = _check_rank(inner, "B", sigma_uu.shape[0])
    estimate = _tau_from_inner(cov, inner, conditions)
    logger.debug("external-information τ = %.6g (cond B %.3g)", estimate.tau, conditions["B"])
    return estimate if return_diagnostics else estimate.tau


def tau_three_view(cov: CovSet, return_diagnostics: bool = False):
    """Same τ with B = Σ_WZ Σ_VZ⁻¹ Σ_VW, which needs no knowledge of β_WU"""
    if not cov.has_three_views:
        raise DimensionError("three-view estimation needs Σ_VW, Σ_WZ and Σ_VZ")
    if cov.sigma_VZ.shape[0] != cov.sigma_VZ.shape[1]:
        raise DimensionError("Σ_VZ must be square; reduce V and Z to dim(Ū) first")
    dim = cov.sigma_VZ.shape[0]
    conditions = {"sigma_VZ": _check_rank(cov.sigma_VZ, "Σ_VZ", dim)}
    inner = cov.sigma_WZ @ np.linalg.solve(cov.sigma_VZ, cov.sigma_VW)
    conditions["B"] = _check_rank(inner, "B", dim)
    estimate = _tau_from_inner(cov, inner, conditions)
    logger.debug("three-view τ = %.6g (cond Σ_VZ %.3g)", estimate.tau, conditions["sigma_VZ"])
    return estimate if return_diagnostics else estimate.tau


@dataclass
class ProxyReduction:
    """`transform` maps a proxy row w to transform @ w"""

    transform: np.ndarray
    reduced: np.ndarray
    singular_values: np.ndarray

    def apply(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=float) @ self.transform.T


def reduce_proxy(matrix, target_dim: int, beta: bool = False) -> ProxyReduction:
    """
    Shrink a proxy to target_dim rows/columns.

    Args:
        matrix: β_WU (proxy_dim × dim Ū) when beta=True, else proxy data (rows = individuals)
        target_dim: dimension of Ū
        beta: row-reduce a known mechanism matrix instead of projecting data

    Returns:
        ProxyReduction; `reduced` is T β for a mechanism, or the projected data
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    width = matrix.shape[0] if beta else matrix.shape[1]
    centered = matrix if beta else matrix - matrix.mean(axis=0)
    singular = sla.svdvals(centered)
    rank = int(np.sum(singular > RANK_TOLERANCE * singular[0])) if singular.size and singular[0] > 0 else 0
    if rank < target_dim:
        raise RankError(f"proxy has numerical rank {rank} < {target_dim}", singular_values=singular)

    if width == target_dim:
        transform = np.eye(width)
    elif beta:
        # β = P L U; extend L to a unit lower-triangular square matrix and invert
        perm, lower, _ = sla.lu(matrix)
        full = np.eye(width)
        full[:, :lower.shape[1]] = lower
        elimination = sla.solve_triangular(full, perm.T, lower=True, unit_diagonal=True)
        transform = elimination[:target_dim]
    else:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        transform = vt[:target_dim]
    reduced = transform @ matrix if beta else matrix @ transform.T
    return ProxyReduction(transform, reduced, singular)
