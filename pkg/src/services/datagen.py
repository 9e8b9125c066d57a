"""
Synthetic data-generating processes: toy XOR confounder, Datasets A-E, spatial GWAS
"""
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.special import expit
from sklearn.cluster import KMeans

from src.utils.errors import DatasetFormatError, DimensionError, MissingModalityError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

GLYPH_SIZE = 16
PIXEL_FLIP = 0.05
FLOAT_FORMAT = "%.17g"
DATASET_FORMAT_VERSION = 1

_GLYPH_ROWS = {
    0: [
        "................",
        ".....######.....",
        "....########....",
        "...###....###...",
        "...##......##...",
        "..###......###..",
        "..##........##..",
        "..##........##..",
        "..##........##..",
        "..##........##..",
        "..###......###..",
        "...##......##...",
        "...###....###...",
        "....########....",
        ".....######.....",
        "................",
    ],
    1: [
        "................",
        ".......##.......",
        "......###.......",
        ".....####.......",
        "....##.##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".....######.....",
        ".....######.....",
        "................",
    ],
}
GLYPHS = {
    digit: np.array([[ch == "#" for ch in row] for row in rows], dtype=float).ravel()
    for digit, rows in _GLYPH_ROWS.items()
}


@dataclass
class GroundTruth:
    """Quantities known only because the data are simulated"""

    true_ate: Optional[float] = None
    true_ite: Optional[np.ndarray] = None
    confounder_z: Optional[np.ndarray] = None
    causal_effects: Optional[np.ndarray] = None
    cluster_id: Optional[np.ndarray] = None
    proxy_state: Optional[np.ndarray] = None

    def take(self, rows: np.ndarray) -> "GroundTruth":
        pick = lambda a: None if a is None else a[rows]
        return GroundTruth(
            true_ate=self.true_ate,
            true_ite=pick(self.true_ite),
            confounder_z=pick(self.confounder_z),
            causal_effects=self.causal_effects,
            cluster_id=pick(self.cluster_id),
            proxy_state=pick(self.proxy_state),
        )


@dataclass
class Dataset:
    """Named proxy modalities plus treatment, outcome and per-row missing masks"""

    modalities: Dict[str, np.ndarray]
    treatment: np.ndarray
    outcome: np.ndarray
    modality_kinds: Dict[str, str] = field(default_factory=dict)
    outcome_kind: str = "bernoulli"
    treatment_kind: str = "binary"
    observed_confounder: Optional[np.ndarray] = None
    truth: Optional[GroundTruth] = None
    missing_mask: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.outcome)
        for name, matrix in self.modalities.items():
            if matrix.ndim != 2 or matrix.shape[0] != n:
                raise DimensionError(f"modality '{name}' has shape {matrix.shape}, expected ({n}, d)")
            self.modality_kinds.setdefault(name, "gaussian")
            self.missing_mask.setdefault(name, np.zeros(n, dtype=bool))
        if len(self.treatment) != n:
            raise DimensionError("treatment and outcome row counts differ")
        if self.observed_confounder is not None and self.observed_confounder.shape[0] != n:
            raise DimensionError("observed confounder row count differs")
        for name, mask in self.missing_mask.items():
            if name not in self.modalities or mask.shape != (n,):
                raise DimensionError(f"mask for '{name}' does not match the dataset")

    @property
    def n_rows(self) -> int:
        return len(self.outcome)

    @property
    def modality_names(self) -> List[str]:
        return list(self.modalities)

    def modality_dim(self, name: str) -> int:
        return self.modalities[name].shape[1]

    def available(self, name: str) -> np.ndarray:
        if name not in self.modalities:
            raise MissingModalityError(f"unknown modality '{name}'")
        return ~self.missing_mask[name]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            modalities={k: v[rows] for k, v in self.modalities.items()},
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            modality_kinds=dict(self.modality_kinds),
            outcome_kind=self.outcome_kind,
            treatment_kind=self.treatment_kind,
            observed_confounder=None if self.observed_confounder is None else self.observed_confounder[rows],
            truth=None if self.truth is None else self.truth.take(rows),
            missing_mask={k: v[rows] for k, v in self.missing_mask.items()},
            metadata=dict(self.metadata),
        )

    def select_modalities(self, names: Sequence[str]) -> "Dataset":
        for name in names:
            if name not in self.modalities:
                raise MissingModalityError(f"unknown modality '{name}'")
        return replace(
            self,
            modalities={k: self.modalities[k] for k in names},
            modality_kinds={k: self.modality_kinds[k] for k in names},
            missing_mask={k: self.missing_mask[k].copy() for k in names},
        )


class ToyParams(BaseModel):
    rho_x0: float = Field(0.1, gt=0, lt=1)
    rho_x1: float = Field(0.3, gt=0, lt=1)
    rho_t0: float = Field(0.2, gt=0, lt=1)
    rho_t1: float = Field(0.4, gt=0, lt=1)
    n: int = Field(3000, ge=1)


DEFAULT_FOURIER = [
    {"a0": 0.0, "a1": -1.0, "a2": 1.0, "b1": -1.0, "b2": 1.0},
    {"a0": 1.0, "a1": -5.0, "a2": 2.0, "b1": -5.0, "b2": 2.0},
    {"a0": -1.0, "a1": -2.0, "a2": 5.0, "b1": -2.0, "b2": 5.0},
]


class GwasParams(BaseModel):
    n_individuals: int = Field(10000, ge=2)
    n_snps: int = Field(10, ge=1)
    n_clusters: int = Field(3, ge=1)
    n_causal: int = Field(2, ge=0)
    latent_rank: int = Field(2, ge=1)
    noise_scale: float = Field(1.0, ge=0)
    confounding_strength: float = Field(1.0, ge=0)
    effect_low: float = Field(0.5, gt=0)
    effect_high: float = Field(1.5, gt=0)
    kmeans_iterations: int = Field(10, ge=1)
    fourier: List[Dict[str, float]] = Field(default_factory=lambda: [dict(c) for c in DEFAULT_FOURIER])
    n_samples: int = Field(50, ge=1)
    n_periods: int = Field(2, ge=1)
    period: float = Field(5.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.n_causal > self.n_snps:
            raise ValueError("n_causal must not exceed n_snps")
        if self.n_clusters > len(self.fourier):
            raise ValueError("need one Fourier coefficient row per cluster")
        if self.effect_low > self.effect_high:
            raise ValueError("effect_low must not exceed effect_high")
        return self


def render_glyphs(digits: np.ndarray, rng: RngStream, flip: float = PIXEL_FLIP) -> np.ndarray:
    """16×16 stencil of each binary digit, every pixel flipped with probability `flip`"""
    digits = np.asarray(digits, dtype=int)
    images = np.stack([GLYPHS[0], GLYPHS[1]])[digits]
    flips = rng.uniform(images.shape) < flip
    return np.where(flips, 1.0 - images, images)


def _bern(rng: RngStream, p) -> np.ndarray:
    return rng.bernoulli(p)


def toy_true_ite(params: ToyParams, x_star) -> np.ndarray:
    """Causal ITE given the proxy state: P(z=0|x*) − P(z=1|x*)"""
    x_star = np.asarray(x_star)
    like_z1 = np.where(x_star == 1, params.rho_x1, 1.0 - params.rho_x1)
    like_z0 = np.where(x_star == 1, params.rho_x0, 1.0 - params.rho_x0)
    return (like_z0 - like_z1) / (like_z0 + like_z1)


def gen_toy(params: ToyParams, image_proxy: bool, rng: RngStream) -> Dataset:
    n = params.n
    z = _bern(rng, np.full(n, 0.5))
    x_star = _bern(rng, np.where(z == 1, params.rho_x1, params.rho_x0))
    t = _bern(rng, np.where(z == 1, params.rho_t1, params.rho_t0))
    y = np.bitwise_xor(t, z)
    if image_proxy:
        modalities = {"image": render_glyphs(x_star, rng)}
    else:
        modalities = {"x": x_star[:, None].astype(float)}
    return Dataset(
        modalities=modalities,
        treatment=t.astype(float),
        outcome=y.astype(float),
        modality_kinds={name: "bernoulli" for name in modalities},
        truth=GroundTruth(
            true_ate=0.0,
            true_ite=toy_true_ite(params, x_star),
            confounder_z=z[:, None].astype(float),
            proxy_state=x_star[:, None].astype(float),
        ),
        metadata={"generator": "toy", "image_proxy": str(image_proxy), **{k: str(v) for k, v in params.model_dump().items()}},
    )


def closed_form_noncausal_ate(params: ToyParams, marginal: str = "exact") -> float:
    """
    ATE obtained by adjusting on the proxy X* instead of z.

    Args:
        params: toy process parameters
        marginal: "exact" uses P(X*=1) = (ρ_x1 + ρ_x0)/2, the marginal of the
            stated process; "complement" uses (ρ_x1 + 1 − ρ_x0)/2, which mixes
            in the z=0 complement probability

    Returns:
        E_adj[y|do(t=1)] − E_adj[y|do(t=0)]
    """
    rx0, rx1, rt0, rt1 = params.rho_x0, params.rho_x1, params.rho_t0, params.rho_t1
    if marginal == "exact":
        p_x1 = 0.5 * (rx1 + rx0)
    elif marginal == "complement":
        p_x1 = 0.5 * (rx1 + 1.0 - rx0)
    else:
        raise ValueError("marginal must be 'exact' or 'complement'")
    p_x0 = 1.0 - p_x1
    do_one = p_x1 * (rx0 * rt0) / (rx1 * rt1 + rx0 * rt0) + p_x0 * ((1 - rx0) * rt0) / (
        (1 - rx1) * rt1 + (1 - rx0) * rt0
    )
    do_zero = p_x1 * (rx1 * (1 - rt1)) / (rx1 * (1 - rt1) + rx0 * (1 - rt0)) + p_x0 * (
        (1 - rx1) * (1 - rt1)
    ) / ((1 - rx1) * (1 - rt1) + (1 - rx0) * (1 - rt0))
    return float(do_one - do_zero)


def _posterior_ite(prior: np.ndarray, likelihood: np.ndarray, effect: np.ndarray) -> np.ndarray:
    """Σ_c effect_c P(c | proxies) for enumerated latent cells c; likelihood is (rows, cells)"""
    weights = likelihood * prior[None, :]
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ effect


def _flip_prob(x, z, p_match_one: float, p_one_given_zero: float) -> np.ndarray:
    """P(x | z) for a binary x with P(x=1|z=1)=p_match_one, P(x=1|z=0)=p_one_given_zero"""
    p1 = np.where(z == 1, p_match_one, p_one_given_zero)
    return np.where(x == 1, p1, 1.0 - p1)


def _gen_dataset_a(n: int, rng: RngStream) -> Dataset:
    z = _bern(rng, np.full(n, 0.5))
    x1s = _bern(rng, np.where(z == 1, 0.1, 0.9))
    x2 = _bern(rng, np.where(z == 1, 0.2, 0.8))
    t = _bern(rng, np.where(z == 1, 0.2, 0.8))
    y = np.bitwise_xor(z, t)
    cells = np.array([0, 1])
    like = _flip_prob(x1s[:, None], cells[None, :], 0.1, 0.9) * _flip_prob(x2[:, None], cells[None, :], 0.2, 0.8)
    ite = _posterior_ite(np.array([0.5, 0.5]), like, np.array([1.0, -1.0]))
    return Dataset(
        modalities={"x1": render_glyphs(x1s, rng), "x2": x2[:, None].astype(float)},
        treatment=t.astype(float),
        outcome=y.astype(float),
        modality_kinds={"x1": "bernoulli", "x2": "bernoulli"},
        truth=GroundTruth(true_ate=0.0, true_ite=ite, confounder_z=z[:, None].astype(float),
                          proxy_state=np.stack([x1s, x2], axis=1).astype(float)),
    )


def _dataset_b_treatment_prob(z, x2):
    return np.where(x2 == 1, np.where(z == 1, 0.2, 0.8), np.where(z == 1, 0.9, 0.1))


def _gen_dataset_b(n: int, rng: RngStream) -> Dataset:
    z = _bern(rng, np.full(n, 0.5))
    x2 = _bern(rng, np.full(n, 0.5))
    x1s = _bern(rng, np.where(z == 1, 0.1, 0.9))
    t = _bern(rng, _dataset_b_treatment_prob(z, x2))
    y = x2 & np.bitwise_xor(z, t)
    cells = np.array([0, 1])
    like = _flip_prob(x1s[:, None], cells[None, :], 0.1, 0.9)
    ite = x2 * _posterior_ite(np.array([0.5, 0.5]), like, np.array([1.0, -1.0]))
    return Dataset(
        modalities={"x1": render_glyphs(x1s, rng)},
        treatment=t.astype(float),
        outcome=y.astype(float),
        modality_kinds={"x1": "bernoulli"},
        observed_confounder=x2[:, None].astype(float),
        truth=GroundTruth(true_ate=enumerate_true_ate("B"), true_ite=ite,
                          confounder_z=z[:, None].astype(float),
                          proxy_state=np.stack([x1s, x2], axis=1).astype(float)),
    )


def _dataset_c_treatment_prob(z, x2):
    return np.where(x2 == 1, np.where(z == 1, 0.9, 0.1), np.where(z == 1, 0.1, 0.9))


def _gen_dataset_c(n: int, rng: RngStream) -> Dataset:
    z1 = _bern(rng, np.full(n, 0.5))
    z2 = _bern(rng, np.full(n, 0.5))
    x1s = _bern(rng, np.where(z1 == 1, 0.1, 0.9))
    x2 = _bern(rng, np.where(z2 == 1, 0.9, 0.1))
    z = np.bitwise_xor(z1, z2)
    t = _bern(rng, _dataset_c_treatment_prob(z, x2))
    y = x2 ^ t ^ z
    # cells enumerate (z1, z2); ITE = 1 − 2 (x2 ⊕ z1 ⊕ z2)
    cells = np.array(list(itertools.product([0, 1], repeat=2)))
    like = _flip_prob(x1s[:, None], cells[None, :, 0], 0.1, 0.9) * _flip_prob(x2[:, None], cells[None, :, 1], 0.9, 0.1)
    weights = like * 0.25
    weights /= weights.sum(axis=1, keepdims=True)
    effect = 1.0 - 2.0 * (x2[:, None] ^ cells[None, :, 0] ^ cells[None, :, 1])
    ite = np.sum(weights * effect, axis=1)
    return Dataset(
        modalities={"x1": render_glyphs(x1s, rng)},
        treatment=t.astype(float),
        outcome=y.astype(float),
        modality_kinds={"x1": "bernoulli"},
        observed_confounder=x2[:, None].astype(float),
        truth=GroundTruth(true_ate=enumerate_true_ate("C"), true_ite=ite,
                          confounder_z=np.stack([z1, z2], axis=1).astype(float),
                          proxy_state=np.stack([x1s, x2], axis=1).astype(float)),
    )


def _dataset_d_x2_prob(z2, x1):
    return np.where(x1 == 0, np.where(z2 == 1, 0.8, 0.2), np.where(z2 == 1, 0.2, 0.8))


def _gen_dataset_d(n: int, rng: RngStream) -> Dataset:
    z1, z2, z3 = (_bern(rng, np.full(n, 0.5)) for _ in range(3))
    x1 = _bern(rng, np.where(z1 == 1, 0.1, 0.9))
    x2 = _bern(rng, _dataset_d_x2_prob(z2, x1))
    x3s = _bern(rng, np.where(z3 == 1, 0.3, 0.7))
    z = z1 ^ z2 ^ z3
    t = _bern(rng, np.where(z == 1, 0.2, 0.8))
    y = np.bitwise_xor(t, z)
    cells = np.array(list(itertools.product([0, 1], repeat=3)))
    p_x2 = _dataset_d_x2_prob(cells[None, :, 1], x1[:, None])
    like = (
        _flip_prob(x1[:, None], cells[None, :, 0], 0.1, 0.9)
        * np.where(x2[:, None] == 1, p_x2, 1.0 - p_x2)
        * _flip_prob(x3s[:, None], cells[None, :, 2], 0.3, 0.7)
    )
    z_cells = cells[:, 0] ^ cells[:, 1] ^ cells[:, 2]
    ite = _posterior_ite(np.full(8, 0.125), like, 1.0 - 2.0 * z_cells)
    return Dataset(
        modalities={"x1": x1[:, None].astype(float), "x2": x2[:, None].astype(float),
                    "x3": render_glyphs(x3s, rng)},
        treatment=t.astype(float),
        outcome=y.astype(float),
        modality_kinds={"x1": "bernoulli", "x2": "bernoulli", "x3": "bernoulli"},
        truth=GroundTruth(true_ate=0.0, true_ite=ite,
                          confounder_z=np.stack([z1, z2, z3], axis=1).astype(float),
                          proxy_state=np.stack([x1, x2, x3s], axis=1).astype(float)),
    )


def _dataset_e_effect(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return expit(3.0 * z + 2.0) - expit(3.0 * z - 2.0)


def _gen_dataset_e(n: int, m: int, rng: RngStream) -> Dataset:
    zs = np.stack([_bern(rng, np.full(n, i / m)) for i in range(1, m + 1)], axis=1)
    z = np.bitwise_xor.reduce(zs, axis=1)
    t = _bern(rng, np.where(z == 1, 0.25, 0.75))
    y = _bern(rng, expit(3.0 * z + np.where(t == 1, 2.0, -2.0)))
    modalities = {f"x{i + 1}": render_glyphs(zs[:, i], rng) for i in range(m)}
    return Dataset(
        modalities=modalities,
        treatment=t.astype(float),
        outcome=y.astype(float),
        modality_kinds={name: "bernoulli" for name in modalities},
        truth=GroundTruth(true_ate=enumerate_true_ate("E", m), true_ite=_dataset_e_effect(z),
                          confounder_z=zs.astype(float), proxy_state=zs.astype(float)),
    )


def enumerate_true_ate(which: str, m_modalities: int = 1) -> float:
    """Exact population ATE of Datasets A-E by enumerating their finite latent cells"""
    which = which.upper()
    if which in ("A", "D"):
        # y = t ⊕ z with z ~ Ber(1/2): E[y|do(1)] − E[y|do(0)] = P(z=0) − P(z=1)
        return 0.0
    if which == "B":
        total = 0.0
        for z, x2 in itertools.product([0, 1], repeat=2):
            total += 0.25 * ((x2 & (z ^ 1)) - (x2 & z))
        return float(total)
    if which == "C":
        total = 0.0
        for z1, z2, x2 in itertools.product([0, 1], repeat=3):
            p_x2 = 0.9 if (x2 == 1) == (z2 == 1) else 0.1
            total += 0.25 * p_x2 * ((x2 ^ 1 ^ z1 ^ z2) - (x2 ^ z1 ^ z2))
        return float(total)
    if which == "E":
        if m_modalities < 1:
            raise ValueError("Dataset E needs m_modalities >= 1")
        probs = np.arange(1, m_modalities + 1) / m_modalities
        p_z1 = 0.5 * (1.0 - np.prod(1.0 - 2.0 * probs))
        return float(p_z1 * _dataset_e_effect(1) + (1.0 - p_z1) * _dataset_e_effect(0))
    raise ValueError(f"unknown dataset '{which}', expected one of A-E")


def gen_dataset_a_to_e(which: str, n: int, rng: RngStream, m_modalities: int = 1) -> Dataset:
    which = str(which).upper()
    if which == "A":
        dataset = _gen_dataset_a(n, rng)
    elif which == "B":
        dataset = _gen_dataset_b(n, rng)
    elif which == "C":
        dataset = _gen_dataset_c(n, rng)
    elif which == "D":
        dataset = _gen_dataset_d(n, rng)
    elif which == "E":
        if m_modalities < 1:
            raise ValueError("Dataset E needs m_modalities >= 1")
        dataset = _gen_dataset_e(n, m_modalities, rng)
    else:
        raise ValueError(f"unknown dataset '{which}', expected one of A-E")
    dataset.metadata.update({"generator": f"dataset_{which.lower()}", "n": str(n), "m_modalities": str(m_modalities)})
    return dataset


def fourier_series(coefficients: Dict[str, float], times: np.ndarray, period: float) -> np.ndarray:
    """½a₀ + Σ_{ℓ=1,2} a_ℓ cos(2π t(ℓ−1)/T) + b_ℓ sin(2π t(ℓ−1)/T)"""
    values = np.full_like(times, 0.5 * coefficients["a0"], dtype=float)
    for ell in (1, 2):
        angle = 2.0 * np.pi * times * (ell - 1) / period
        values += coefficients[f"a{ell}"] * np.cos(angle) + coefficients[f"b{ell}"] * np.sin(angle)
    return values


def sample_times(params: GwasParams) -> np.ndarray:
    return params.period * params.n_periods * np.arange(params.n_samples) / params.n_samples


def _kmeans_assign(points: np.ndarray, k: int, iterations: int, rng: RngStream) -> np.ndarray:
    """Lloyd k-means seeded with k random individuals"""
    model = KMeans(
        n_clusters=k, init="random", n_init=1, max_iter=iterations, algorithm="lloyd",
        random_state=int(rng.integers(0, 2**31 - 1)),
    )
    return model.fit_predict(points)


def gen_gwas_spatial(params: GwasParams, rng: RngStream) -> Dataset:
    n, m, k = params.n_individuals, params.n_snps, params.n_clusters
    logger.info("Generating spatial GWAS simulation: N=%d M=%d K=%d", n, m, k)
    gamma = rng.normal((m, params.latent_rank))
    positions = rng.normal((params.latent_rank, n))
    logits = gamma @ positions
    snps = rng.binomial(3, expit(logits)).T.astype(float)

    cluster = _kmeans_assign(positions.T.copy(), k, params.kmeans_iterations, rng)
    offsets = params.confounding_strength * rng.normal(k)

    effects = np.zeros(m)
    causal = rng.choice(m, size=params.n_causal, replace=False) if params.n_causal else np.array([], dtype=int)
    magnitudes = params.effect_low + (params.effect_high - params.effect_low) * rng.uniform(params.n_causal)
    signs = np.where(rng.uniform(params.n_causal) < 0.5, -1.0, 1.0)
    effects[causal] = signs * magnitudes

    outcome = snps @ effects + offsets[cluster] + params.noise_scale * rng.normal(n)

    times = sample_times(params)
    table = np.stack([fourier_series(params.fourier[j], times, params.period) for j in range(k)])
    series = table[cluster]

    one_hot = np.eye(k)[cluster][:, 1:]
    return Dataset(
        modalities={"snps": snps, "timeseries": series},
        treatment=snps.copy(),
        outcome=outcome,
        modality_kinds={"snps": "binomial3", "timeseries": "gaussian"},
        outcome_kind="gaussian",
        treatment_kind="snp",
        truth=GroundTruth(
            confounder_z=one_hot,
            causal_effects=effects,
            cluster_id=cluster,
            proxy_state=offsets[cluster][:, None],
        ),
        metadata={"generator": "gwas_spatial", **{
            key: str(value) for key, value in params.model_dump().items() if key != "fourier"
        }},
    )


def drop_modalities(dataset: Dataset, modality: str, fraction: float, rng: RngStream) -> Dataset:
    """Mark a uniformly random fraction of rows missing for one modality"""
    if modality not in dataset.modalities:
        raise MissingModalityError(f"unknown modality '{modality}'")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    drop = rng.uniform(dataset.n_rows) < fraction
    masks = {k: v.copy() for k, v in dataset.missing_mask.items()}
    masks[modality] = masks[modality] | drop
    return replace(dataset, missing_mask=masks)


def split_dataset(
    dataset: Dataset, fractions: Tuple[float, float, float], rng: RngStream
) -> Dict[str, Dataset]:
    """Deterministic train/val/test split by a random permutation of rows"""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = rng.permutation(dataset.n_rows)
    n_train = int(round(fractions[0] * dataset.n_rows))
    n_val = int(round(fractions[1] * dataset.n_rows))
    return {
        "train": dataset.take(np.sort(order[:n_train])),
        "val": dataset.take(np.sort(order[n_train:n_train + n_val])),
        "test": dataset.take(np.sort(order[n_train + n_val:])),
    }


def _write_csv(path: Path, matrix: np.ndarray, columns: List[str]) -> None:
    pd.DataFrame(np.asarray(matrix), columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _columns(prefix: str, width: int) -> List[str]:
    return [f"{prefix}_{i}" for i in range(width)]


def save_dataset(dataset: Dataset, directory) -> Path:
    """
    Write a dataset directory.

    Layout: metadata.txt (key = value lines), one <modality>.csv per modality,
    treatment.csv, outcome.csv, mask.csv, and optionally
    observed_confounder.csv and truth.csv. Floats use 17 significant digits.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": str(DATASET_FORMAT_VERSION),
        "n": str(dataset.n_rows),
        "modalities": ",".join(dataset.modality_names),
        "outcome_kind": dataset.outcome_kind,
        "treatment_kind": dataset.treatment_kind,
    }
    for name in dataset.modality_names:
        meta[f"modality.{name}"] = f"{dataset.modality_dim(name)}:{dataset.modality_kinds[name]}"
        _write_csv(directory / f"{name}.csv", dataset.modalities[name], _columns(name, dataset.modality_dim(name)))

    treatment = dataset.treatment if dataset.treatment.ndim == 2 else dataset.treatment[:, None]
    t_cols = ["t"] if dataset.treatment.ndim == 1 else _columns("t", treatment.shape[1])
    _write_csv(directory / "treatment.csv", treatment, t_cols)
    _write_csv(directory / "outcome.csv", dataset.outcome[:, None], ["y"])
    mask = np.stack([dataset.missing_mask[k] for k in dataset.modality_names], axis=1).astype(int)
    pd.DataFrame(mask, columns=dataset.modality_names).to_csv(directory / "mask.csv", index=False)
    if dataset.observed_confounder is not None:
        v = dataset.observed_confounder
        _write_csv(directory / "observed_confounder.csv", v, _columns("v", v.shape[1]))

    truth = dataset.truth
    if truth is not None:
        if truth.true_ate is not None:
            meta["truth.true_ate"] = FLOAT_FORMAT % truth.true_ate
        if truth.causal_effects is not None:
            meta["truth.causal_effects"] = ",".join(FLOAT_FORMAT % v for v in truth.causal_effects)
        frame = {}
        if truth.true_ite is not None:
            frame["true_ite"] = truth.true_ite
        if truth.cluster_id is not None:
            frame["cluster_id"] = truth.cluster_id
        for prefix, matrix in (("z", truth.confounder_z), ("proxy", truth.proxy_state)):
            if matrix is not None:
                for i in range(matrix.shape[1]):
                    frame[f"{prefix}_{i}"] = matrix[:, i]
        if frame:
            pd.DataFrame(frame).to_csv(directory / "truth.csv", index=False, float_format=FLOAT_FORMAT)

    meta.update({f"param.{k}": v for k, v in dataset.metadata.items()})
    with open(directory / "metadata.txt", "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key} = {value}\n")
    return directory


def read_metadata(path) -> Dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetFormatError(f"bad metadata line: {line!r}")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    if not (directory / "metadata.txt").exists():
        raise DatasetFormatError(f"{directory} has no metadata.txt")
    meta = read_metadata(directory / "metadata.txt")
    names = [n for n in meta.get("modalities", "").split(",") if n]
    modalities, kinds = {}, {}
    for name in names:
        dim, kind = meta[f"modality.{name}"].split(":")
        matrix = pd.read_csv(directory / f"{name}.csv").to_numpy(dtype=float)
        if matrix.shape[1] != int(dim):
            raise DatasetFormatError(f"{name}.csv has {matrix.shape[1]} columns, metadata says {dim}")
        modalities[name], kinds[name] = matrix, kind

    treatment = pd.read_csv(directory / "treatment.csv").to_numpy(dtype=float)
    if treatment.shape[1] == 1 and meta.get("treatment_kind") != "snp":
        treatment = treatment[:, 0]
    outcome = pd.read_csv(directory / "outcome.csv")["y"].to_numpy(dtype=float)
    mask_frame = pd.read_csv(directory / "mask.csv")
    masks = {name: mask_frame[name].to_numpy().astype(bool) for name in names}

    observed = None
    if (directory / "observed_confounder.csv").exists():
        observed = pd.read_csv(directory / "observed_confounder.csv").to_numpy(dtype=float)

    truth = None
    if (directory / "truth.csv").exists() or "truth.true_ate" in meta or "truth.causal_effects" in meta:
        truth = GroundTruth()
        if "truth.true_ate" in meta:
            truth.true_ate = float(meta["truth.true_ate"])
        if "truth.causal_effects" in meta:
            truth.causal_effects = np.array([float(v) for v in meta["truth.causal_effects"].split(",")])
        if (directory / "truth.csv").exists():
            frame = pd.read_csv(directory / "truth.csv")
            if "true_ite" in frame:
                truth.true_ite = frame["true_ite"].to_numpy(dtype=float)
            if "cluster_id" in frame:
                truth.cluster_id = frame["cluster_id"].to_numpy(dtype=int)
            z_cols = [c for c in frame.columns if c.startswith("z_")]
            if z_cols:
                truth.confounder_z = frame[z_cols].to_numpy(dtype=float)
            p_cols = [c for c in frame.columns if c.startswith("proxy_")]
            if p_cols:
                truth.proxy_state = frame[p_cols].to_numpy(dtype=float)

    params = {k[len("param."):]: v for k, v in meta.items() if k.startswith("param.")}
    return Dataset(
        modalities=modalities,
        treatment=treatment,
        outcome=outcome,
        modality_kinds=kinds,
        outcome_kind=meta.get("outcome_kind", "bernoulli"),
        treatment_kind=meta.get("treatment_kind", "binary"),
        observed_confounder=observed,
        truth=truth,
        missing_mask=masks,
        metadata=params,
    )
