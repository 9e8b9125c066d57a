"""
Classical estimators: OLS, IPTW, AIPTW, linear latent adjustment, per-SNP regression
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as sla
from scipy.special import expit
from sklearn.decomposition import PCA, FactorAnalysis
from sklearn.exceptions import ConvergenceWarning

from src.services.datagen import Dataset
from src.services.diffnet import MlpFunction, NetworkOptimizer
from src.services.heads import bernoulli_loglik
from src.services.trainer import TrainingConfig, TrainingTrace, run_epochs
from src.utils.config import get_settings
from src.utils.errors import DimensionError, DomainError, RegressionError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

SINGULAR_TOLERANCE = 1e-10
PROPENSITY_HIDDEN = (20, 20)


def feature_matrix(dataset: Dataset) -> np.ndarray:
    """All modalities side by side (masked rows zeroed) plus the observed confounder"""
    blocks = []
    for name in dataset.modality_names:
        block = dataset.modalities[name].astype(float)
        block[dataset.missing_mask[name]] = 0.0
        blocks.append(block)
    if dataset.observed_confounder is not None:
        blocks.append(dataset.observed_confounder.astype(float))
    if not blocks:
        return np.zeros((dataset.n_rows, 0))
    return np.hstack(blocks)


def least_squares(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(AᵀA)⁻¹Aᵀy; RegressionError when AᵀA is numerically singular"""
    gram = design.T @ design
    singular = sla.svdvals(gram) if gram.size else np.array([0.0])
    if singular.size == 0 or singular[-1] <= SINGULAR_TOLERANCE * singular[0]:
        raise RegressionError(
            f"singular normal equations (condition {singular[0] / max(singular[-1], 1e-300):.3g})"
        )
    return sla.solve(gram, design.T @ y, assume_a="pos")


def ols_effect(covariates: np.ndarray, t: np.ndarray, y: np.ndarray) -> float:
    n = len(y)
    covariates = np.asarray(covariates, dtype=float).reshape(n, -1)
    design = np.column_stack([np.ones(n), covariates, t])
    return float(least_squares(design, np.asarray(y, dtype=float))[-1])


def ols_ate(dataset: Dataset) -> float:
    """Coefficient of t in the least-squares fit of y on [1, covariates, t]"""
    return ols_effect(feature_matrix(dataset), dataset.treatment.astype(float), dataset.outcome)


def _check_propensity(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if np.any((e <= 0.0) | (e >= 1.0)):
        raise DomainError("propensity of exactly 0 or 1 makes the inverse weights overflow")
    return e


def iptw_estimate(t, y, e) -> float:
    """(1/n) Σ [t y / ê − (1−t) y / (1−ê)]"""
    t, y = np.asarray(t, float), np.asarray(y, float)
    e = _check_propensity(e)
    return float(np.mean(t * y / e - (1.0 - t) * y / (1.0 - e)))


def aiptw_estimate(t, y, e, m1, m0) -> float:
    """(1/n) Σ [m̂₁ − m̂₀ + t (y − m̂₁)/ê − (1−t)(y − m̂₀)/(1−ê)]"""
    t, y = np.asarray(t, float), np.asarray(y, float)
    m1, m0 = np.asarray(m1, float), np.asarray(m0, float)
    e = _check_propensity(e)
    return float(np.mean(m1 - m0 + t * (y - m1) / e - (1.0 - t) * (y - m0) / (1.0 - e)))


class PropensityModel:
    """MLP from features to the treatment logit; clamped to [c, 1−c] with c from settings"""

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int] = PROPENSITY_HIDDEN,
        clamp: bool = True,
        rng: Optional[RngStream] = None,
    ):
        self.clamp = get_settings().propensity_clamp if clamp else None
        self.network = MlpFunction(input_dim, hidden, {"logit": 1}, rng=rng or RngStream(0))

    def fit(self, features: np.ndarray, t: np.ndarray, config: TrainingConfig, rng: RngStream) -> TrainingTrace:
        optimizer = NetworkOptimizer({"propensity": self.network}, config.adam())
        t = np.asarray(t, dtype=float)

        def step(rows, _):
            optimizer.zero_grad()
            out, trace = self.network.forward_traced(features[rows])
            ll, d_logit = bernoulli_loglik(t[rows][:, None], out["logit"])
            self.network.backward({"logit": d_logit}, trace)
            return float(np.sum(ll)), 0.0

        return run_epochs(step, len(t), config, rng, label="propensity", optimizer=optimizer)

    def predict(self, features: np.ndarray) -> np.ndarray:
        e = expit(self.network.forward_traced(features)[0]["logit"][:, 0])
        if self.clamp is None:
            return e
        return np.clip(e, self.clamp, 1.0 - self.clamp)


class OutcomeRegression:
    """MLP regression of y on features, fitted by least squares within one treatment arm"""

    def __init__(self, input_dim: int, hidden: Sequence[int] = PROPENSITY_HIDDEN, rng: Optional[RngStream] = None):
        self.network = MlpFunction(input_dim, hidden, {"mean": 1}, rng=rng or RngStream(0))

    def fit(self, features: np.ndarray, y: np.ndarray, config: TrainingConfig, rng: RngStream) -> TrainingTrace:
        optimizer = NetworkOptimizer({"outcome": self.network}, config.adam())
        y = np.asarray(y, dtype=float)

        def step(rows, _):
            optimizer.zero_grad()
            out, trace = self.network.forward_traced(features[rows])
            resid = y[rows][:, None] - out["mean"]
            self.network.backward({"mean": resid}, trace)
            return float(-0.5 * np.sum(resid ** 2)), 0.0

        return run_epochs(step, len(y), config, rng, label="outcome", optimizer=optimizer)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.network.forward_traced(features)[0]["mean"][:, 0]


def fit_propensity(
    dataset: Dataset, config: TrainingConfig, rng: RngStream, clamp: bool = True
) -> PropensityModel:
    features = feature_matrix(dataset)
    model = PropensityModel(features.shape[1], clamp=clamp, rng=rng.child(0))
    model.fit(features, dataset.treatment, config, rng.child(1))
    return model


def fit_outcome_models(
    dataset: Dataset, config: TrainingConfig, rng: RngStream
) -> Tuple[OutcomeRegression, OutcomeRegression]:
    """(m̂₁, m̂₀), each trained on its own treatment arm"""
    features = feature_matrix(dataset)
    models = []
    for arm in (1, 0):
        rows = dataset.treatment == arm
        if not rows.any():
            raise RegressionError(f"no rows with t={arm} to fit the outcome regression")
        model = OutcomeRegression(features.shape[1], rng=rng.child(2 * arm))
        model.fit(features[rows], dataset.outcome[rows], config, rng.child(2 * arm + 1))
        models.append(model)
    return models[0], models[1]


def iptw_ate(dataset: Dataset, prop: PropensityModel) -> float:
    return iptw_estimate(dataset.treatment, dataset.outcome, prop.predict(feature_matrix(dataset)))


def aiptw_ate(dataset: Dataset, prop: PropensityModel, outcome_models) -> float:
    features = feature_matrix(dataset)
    m1, m0 = outcome_models
    return aiptw_estimate(
        dataset.treatment, dataset.outcome, prop.predict(features), m1.predict(features), m0.predict(features)
    )


def empirical_noncausal_ate(proxy, t, y) -> float:
    """
    Backdoor adjustment on the observed proxy instead of the confounder:
    Σ_s P(s) (E[y|s,t=1] − E[y|s,t=0]) over distinct proxy rows s.
    """
    proxy = np.asarray(proxy, dtype=float).reshape(len(t), -1)
    t, y = np.asarray(t, float), np.asarray(y, float)
    strata, labels = np.unique(proxy, axis=0, return_inverse=True)
    labels = labels.ravel()
    total = 0.0
    for s in range(len(strata)):
        rows = labels == s
        treated, control = rows & (t == 1), rows & (t == 0)
        if not treated.any() or not control.any():
            raise DomainError(f"proxy stratum {strata[s]} lacks a treated or control row")
        total += rows.mean() * (y[treated].mean() - y[control].mean())
    return float(total)


@dataclass
class LatentAdjustment:
    """Fitted linear factor model; `scores` are the training rows' component scores"""

    method: str
    k: int
    estimator: Union[PCA, FactorAnalysis]
    scores: np.ndarray
    converged: bool = True
    iterations: int = 0

    @property
    def uniquenesses(self) -> Optional[np.ndarray]:
        return getattr(self.estimator, "noise_variance_", None) if self.method == "fa" else None

    def transform(self, data: np.ndarray) -> np.ndarray:
        return self.estimator.transform(np.asarray(data, dtype=float))


def fit_latent_adjustment(
    data: np.ndarray, method: str = "pca", k: int = 1, tol: float = 1e-6, max_iter: int = 500
) -> LatentAdjustment:
    """
    Linear confounder scores from one modality.

    Args:
        data: rows = individuals
        method: "pca" or "fa" (factor analysis with diagonal uniquenesses)
        k: number of components
        tol: change in log-likelihood that ends FA iterations
        max_iter: FA iteration cap; hitting it logs a warning and sets converged=False
    """
    data = np.asarray(data, dtype=float)
    if k < 1 or k > min(data.shape):
        raise DimensionError(f"k must lie in [1, {min(data.shape)}]")
    if method == "pca":
        estimator = PCA(n_components=k, svd_solver="full")
        return LatentAdjustment("pca", k, estimator, estimator.fit_transform(data))
    if method == "fa":
        estimator = FactorAnalysis(n_components=k, tol=tol, max_iter=max_iter, svd_method="lapack")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            scores = estimator.fit_transform(data)
        converged = estimator.n_iter_ < max_iter
        if not converged:
            logger.warning("factor analysis did not converge in %d iterations", max_iter)
        return LatentAdjustment("fa", k, estimator, scores, converged, estimator.n_iter_)
    raise ValueError(f"unknown latent adjustment method '{method}', expected 'pca' or 'fa'")


def per_snp_effect(y, snps, z_scores=None) -> np.ndarray:
    """
    For each SNP m, least squares of y on [z, 1, x_m]; returns the x_m coefficients.

    SNPs whose normal equations are singular get NaN and a warning.
    """
    y = np.asarray(y, dtype=float)
    snps = np.asarray(snps, dtype=float)
    n, m = snps.shape
    if len(y) != n:
        raise DimensionError("y and SNP matrix row counts differ")
    z = np.zeros((n, 0)) if z_scores is None else np.asarray(z_scores, dtype=float).reshape(n, -1)
    effects = np.full(m, np.nan)
    for j in range(m):
        design = np.column_stack([z, np.ones(n), snps[:, j]])
        try:
            effects[j] = least_squares(design, y)[-1]
        except RegressionError as exc:
            logger.warning("SNP %d not identified: %s", j, exc)
    return effects
