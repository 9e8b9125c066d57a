"""
Tests for the classical estimators
"""
import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from src.services.baselines_service import (
    PropensityModel,
    aiptw_ate,
    aiptw_estimate,
    empirical_noncausal_ate,
    feature_matrix,
    fit_latent_adjustment,
    fit_outcome_models,
    fit_propensity,
    iptw_ate,
    iptw_estimate,
    least_squares,
    ols_ate,
    ols_effect,
    per_snp_effect,
)
from src.services.datagen import Dataset, GwasParams, ToyParams, closed_form_noncausal_ate, gen_gwas_spatial, gen_toy
from src.services.trainer import TrainingConfig
from src.utils.errors import DimensionError, DomainError, RegressionError
from src.utils.rng import RngStream


class TestOls:
    def test_singular_design(self):
        design = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(RegressionError):
            least_squares(design, np.arange(5.0))

    def test_noiseless_effect(self):
        rng = RngStream(0)
        c = rng.normal((100, 2))
        t = rng.bernoulli(np.full(100, 0.5)).astype(float)
        y = 1.0 + c @ np.array([2.0, -1.0]) + 3.0 * t
        assert ols_effect(c, t, y) == pytest.approx(3.0, abs=1e-9)

    def test_feature_matrix_zeroes_masked_rows(self):
        d = Dataset(
            modalities={"a": np.ones((3, 2))},
            treatment=np.array([0.0, 1.0, 1.0]),
            outcome=np.zeros(3),
            observed_confounder=np.full((3, 1), 5.0),
            missing_mask={"a": np.array([False, True, False])},
        )
        features = feature_matrix(d)
        assert features.shape == (3, 3)
        np.testing.assert_array_equal(features[1], [0.0, 0.0, 5.0])

    def test_ols_on_toy_is_finite(self):
        assert np.isfinite(ols_ate(gen_toy(ToyParams(n=300), False, RngStream(0))))


class TestWeighting:
    def test_iptw_example(self):
        assert iptw_estimate([1.0, 0.0], [1.0, 0.0], [0.5, 0.5]) == 1.0

    def test_aiptw_with_zero_outcome_model_is_iptw(self):
        rng = RngStream(1)
        t = rng.bernoulli(np.full(50, 0.5)).astype(float)
        y = rng.normal(50)
        e = np.full(50, 0.3)
        zeros = np.zeros(50)
        assert aiptw_estimate(t, y, e, zeros, zeros) == pytest.approx(iptw_estimate(t, y, e), rel=1e-12)

    def test_aiptw_with_exact_outcome_model(self):
        t = np.array([1.0, 0.0, 1.0, 0.0])
        y = 2.0 * t
        assert aiptw_estimate(t, y, np.full(4, 0.2), np.full(4, 2.0), np.zeros(4)) == pytest.approx(2.0)

    @pytest.mark.parametrize("e", [0.0, 1.0])
    def test_degenerate_propensity(self, e):
        with pytest.raises(DomainError):
            iptw_estimate([1.0, 0.0], [1.0, 0.0], [e, 0.5])

    def test_propensity_clamp(self):
        model = PropensityModel(2, hidden=(4,), rng=RngStream(0))
        model.network.biases[-1][...] = 50.0
        np.testing.assert_allclose(model.predict(np.zeros((3, 2))), 0.99)
        unclamped = PropensityModel(2, hidden=(4,), clamp=False, rng=RngStream(0))
        unclamped.network.biases[-1][...] = 50.0
        assert np.all(unclamped.predict(np.zeros((3, 2))) > 0.999)

    def test_fitted_estimators_run(self):
        d = gen_toy(ToyParams(n=400), False, RngStream(2))
        config = TrainingConfig(epochs=3, batch_size=64)
        prop = fit_propensity(d, config, RngStream(3))
        e = prop.predict(feature_matrix(d))
        assert np.all((e >= 0.01) & (e <= 0.99))
        assert np.isfinite(iptw_ate(d, prop))
        assert np.isfinite(aiptw_ate(d, prop, fit_outcome_models(d, config, RngStream(4))))

    def test_outcome_models_need_both_arms(self):
        d = Dataset(modalities={"a": np.zeros((3, 1))}, treatment=np.ones(3), outcome=np.zeros(3))
        with pytest.raises(RegressionError):
            fit_outcome_models(d, TrainingConfig(epochs=1), RngStream(0))


class TestNoncausal:
    def test_toy_matches_closed_form(self):
        d = gen_toy(ToyParams(n=200000), False, RngStream(5))
        estimate = empirical_noncausal_ate(d.modalities["x"], d.treatment, d.outcome)
        assert abs(estimate - closed_form_noncausal_ate(ToyParams())) <= 0.02

    def test_stratum_without_control(self):
        with pytest.raises(DomainError):
            empirical_noncausal_ate([0, 0, 1, 1], [0, 1, 1, 1], [0, 1, 1, 0])

    def test_hand_computed(self):
        proxy = [0, 0, 1, 1]
        t = [1, 0, 1, 0]
        y = [1.0, 0.0, 0.0, 0.0]
        assert empirical_noncausal_ate(proxy, t, y) == 0.5


class TestLatentAdjustment:
    @pytest.fixture
    def rank_one(self):
        rng = RngStream(6)
        factor = rng.normal(400)
        data = np.outer(factor, [1.0, -2.0, 0.5, 1.5]) + 0.05 * rng.normal((400, 4))
        return factor, data

    @pytest.mark.parametrize("method", ["pca", "fa"])
    def test_scores_track_factor(self, rank_one, method):
        factor, data = rank_one
        adjustment = fit_latent_adjustment(data, method, 1)
        assert adjustment.scores.shape == (400, 1)
        assert abs(np.corrcoef(adjustment.scores[:, 0], factor)[0, 1]) > 0.99

    def test_fa_fit_state(self, rank_one):
        adjustment = fit_latent_adjustment(rank_one[1], "fa", 1)
        assert 1 <= adjustment.iterations <= 500
        assert adjustment.converged == (adjustment.iterations < 500)
        assert np.all(adjustment.uniquenesses > 0)
        assert fit_latent_adjustment(rank_one[1], "pca", 1).uniquenesses is None

    def test_exact_rank_reconstruction(self):
        rng = RngStream(9)
        data = rng.normal((50, 2)) @ rng.normal((2, 5)) + 3.0
        adjustment = fit_latent_adjustment(data, "pca", 2)
        np.testing.assert_allclose(adjustment.estimator.inverse_transform(adjustment.scores), data, atol=1e-8)

    def test_isotropic_noise_has_no_shared_factor(self):
        adjustment = fit_latent_adjustment(RngStream(10).normal((20000, 4)), "fa", 1)
        assert np.linalg.norm(adjustment.estimator.components_) < 0.25

    def test_pca_scores_ignore_column_shifts(self, rank_one):
        data = rank_one[1]
        base = fit_latent_adjustment(data, "pca", 1).scores[:, 0]
        shifted = fit_latent_adjustment(data + np.array([5.0, -1.0, 2.0, 0.0]), "pca", 1).scores[:, 0]
        np.testing.assert_allclose(np.abs(shifted), np.abs(base), atol=1e-8)

    def test_pca_separates_gwas_clusters(self):
        d = gen_gwas_spatial(GwasParams(n_individuals=1000), RngStream(11))
        scores = fit_latent_adjustment(d.modalities["snps"], "pca", 1).scores
        assert silhouette_score(scores, d.truth.cluster_id) > 0

    def test_bad_arguments(self, rank_one):
        with pytest.raises(DimensionError):
            fit_latent_adjustment(rank_one[1], "pca", 0)
        with pytest.raises(DimensionError):
            fit_latent_adjustment(rank_one[1], "pca", 5)
        with pytest.raises(ValueError):
            fit_latent_adjustment(rank_one[1], "ica", 1)


class TestPerSnp:
    def test_recovers_effect_and_flags_constant_column(self):
        rng = RngStream(7)
        snps = rng.integers(0, 3, (300, 3)).astype(float)
        snps[:, 2] = 1.0
        y = 2.0 * snps[:, 0] + 0.01 * rng.normal(300)
        effects = per_snp_effect(y, snps)
        assert effects[0] == pytest.approx(2.0, abs=0.01)
        assert abs(effects[1]) < 0.01
        assert np.isnan(effects[2])

    def test_adjusts_for_scores(self):
        rng = RngStream(8)
        z = rng.normal(500)
        snps = (z[:, None] + rng.normal((500, 1)) > 0).astype(float)
        y = 3.0 * z + 0.01 * rng.normal(500)
        assert abs(per_snp_effect(y, snps, z)[0]) < 0.01
        assert abs(per_snp_effect(y, snps)[0]) > 1.0

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            per_snp_effect(np.zeros(3), np.zeros((4, 2)))
