"""
Tests for the uni-modal deep structural equation model
"""
import numpy as np
import pytest
from scipy.special import logsumexp

from src.services.datagen import Dataset, ToyParams, gen_toy
from src.services.dgse_service import (
    DgseModel,
    build_dgse,
    dgse_ate,
    dgse_elbo,
    dgse_ite,
    dgse_ite_batch,
    single_modality,
    train_dgse,
    zero_impute_modalities,
)
from src.services.heads import decoder_loglik, outcome_loglik, treatment_loglik
from src.services.trainer import ModelConfig, TrainingConfig
from src.utils.errors import DimensionError, DomainError, StateError
from src.utils.rng import RngStream
from tests.helpers import check_gradients


def _model(outcome_kind: str = "bernoulli", latent_dim: int = 2, seed: int = 0) -> DgseModel:
    return DgseModel(2, "bernoulli", outcome_kind, ModelConfig(latent_dim=latent_dim, hidden=(8,)), RngStream(seed))


def _log_marginal(model: DgseModel, x, t, y, n_nodes: int = 120) -> float:
    """log ∫ N(z; 0, 1) p(x|z) p(t|z) p(y|z,t) dz by Gauss-Hermite quadrature (latent_dim 1)"""
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    z = np.sqrt(2.0) * nodes[:, None]
    k = len(nodes)
    nets = model.networks
    ll_x, _ = decoder_loglik("bernoulli", np.tile(x, (k, 1)), nets["x_decoder"].forward_traced(z)[0])
    ll_t, _ = treatment_loglik(np.full(k, t), nets["t_head"].forward_traced(z)[0])
    y_out = nets["y_head"].forward_traced(np.column_stack([z, np.full(k, t)]))[0]
    ll_y, _ = outcome_loglik("bernoulli", np.full(k, y), y_out, 1.0)
    return float(logsumexp(np.log(weights / np.sqrt(np.pi)) + ll_x + ll_t + ll_y))


class TestElbo:
    def test_lower_bound_on_log_marginal(self):
        model = _model(latent_dim=1, seed=3)
        x, t, y = np.array([1.0, 0.0]), 1.0, 0.0
        n = 40000
        result = dgse_elbo(model, np.tile(x, (n, 1)), np.full(n, t), np.full(n, y), RngStream(1), accumulate=False)
        log_marginal = _log_marginal(model, x, t, y)
        elbo = result.elbo / n
        assert elbo <= log_marginal + 0.03
        assert elbo > log_marginal - 10.0

    def test_gradients_match_finite_differences(self):
        model = _model()
        rng = RngStream(4)
        x = rng.bernoulli(np.full((5, 2), 0.5)).astype(float)
        t = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        y = np.array([0.0, 0.0, 1.0, 1.0, 1.0])

        def value():
            return dgse_elbo(model, x, t, y, RngStream(7), accumulate=False).value

        def grad():
            dgse_elbo(model, x, t, y, RngStream(7), accumulate=True)

        assert check_gradients(model.networks, value, grad, n_checks=10) == 60

    def test_gaussian_proxy_gradients(self):
        model = DgseModel(3, "gaussian", "gaussian", ModelConfig(latent_dim=2, hidden=(6,)), RngStream(2))
        rng = RngStream(5)
        x, t, y = rng.normal((4, 3)), np.array([0.0, 1.0, 1.0, 0.0]), rng.normal(4)
        check_gradients(
            model.networks,
            lambda: dgse_elbo(model, x, t, y, RngStream(8), accumulate=False).value,
            lambda: dgse_elbo(model, x, t, y, RngStream(8), accumulate=True),
            n_checks=10,
        )

    def test_shape_checks(self):
        model = _model()
        with pytest.raises(DimensionError):
            dgse_elbo(model, np.zeros((2, 3)), np.zeros(2), np.zeros(2), RngStream(0))
        with pytest.raises(DimensionError):
            dgse_elbo(model, np.zeros((0, 2)), np.zeros(0), np.zeros(0), RngStream(0))


class TestIte:
    def test_no_treatment_pathway_gives_zero(self):
        model = _model()
        model.networks["y_head"].weights[0][-1, :] = 0.0
        x = RngStream(1).bernoulli(np.full((6, 2), 0.5)).astype(float)
        prediction = dgse_ite_batch(model, x, 20, RngStream(2))
        np.testing.assert_array_equal(prediction.ite, np.zeros(6))

    def test_identity_on_treatment_gives_one(self):
        model = _model(outcome_kind="gaussian")
        head = model.networks["y_head"]
        head.weights[0][...] = 0.0
        head.weights[0][-1, :] = 1.0
        head.biases[0][...] = 0.0
        head.weights[1][...] = 1.0 / head.weights[1].shape[0]
        head.biases[1][...] = 0.0
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(dgse_ite_batch(model, x, 10, RngStream(0)).ite, [1.0, 1.0], rtol=1e-12)

    def test_invariant_to_row_order(self):
        model = _model()
        x = RngStream(3).bernoulli(np.full((12, 2), 0.5)).astype(float)
        base = dgse_ite_batch(model, x, 30, RngStream(9)).ite
        perm = RngStream(4).permutation(12)
        shuffled = dgse_ite_batch(model, x[perm], 30, RngStream(9), row_ids=perm).ite
        np.testing.assert_allclose(shuffled, base[perm], rtol=1e-12, atol=1e-15)

    def test_single_row_matches_batch(self):
        model = _model()
        x = np.array([[1.0, 1.0]])
        assert dgse_ite(model, x[0], 25, RngStream(6)) == dgse_ite_batch(model, x, 25, RngStream(6)).ite[0]

    def test_standard_error_shrinks_with_samples(self):
        model = _model()
        x = np.tile([1.0, 0.0], (200, 1))
        small = dgse_ite_batch(model, x, 50, RngStream(1)).stderr.mean()
        large = dgse_ite_batch(model, x, 200, RngStream(1)).stderr.mean()
        assert 1.6 <= small / large <= 2.4

    def test_needs_samples(self):
        with pytest.raises(DomainError):
            dgse_ite_batch(_model(), np.zeros((1, 2)), 0, RngStream(0))


class TestDatasets:
    def test_single_modality_required(self):
        d = Dataset(
            modalities={"a": np.zeros((3, 1)), "b": np.zeros((3, 1))},
            treatment=np.zeros(3),
            outcome=np.zeros(3),
        )
        with pytest.raises(DimensionError):
            single_modality(d)

    def test_zero_imputation(self):
        d = Dataset(
            modalities={"a": np.ones((3, 2)), "b": np.full((3, 1), 2.0)},
            treatment=np.zeros(3),
            outcome=np.zeros(3),
            modality_kinds={"a": "bernoulli", "b": "bernoulli"},
            missing_mask={"a": np.array([False, True, False])},
        )
        merged = zero_impute_modalities(d)
        np.testing.assert_array_equal(merged.modalities["proxies"][1], [0.0, 0.0, 2.0])
        assert merged.modality_kinds == {"proxies": "bernoulli"}

    def test_zero_imputation_rejects_mixed_likelihoods(self):
        d = Dataset(
            modalities={"a": np.ones((2, 1)), "b": np.ones((2, 1))},
            treatment=np.zeros(2),
            outcome=np.zeros(2),
            modality_kinds={"a": "bernoulli", "b": "gaussian"},
        )
        with pytest.raises(DimensionError):
            zero_impute_modalities(d)


class TestTraining:
    def test_training_improves_objective(self):
        d = gen_toy(ToyParams(n=400), False, RngStream(0))
        model = build_dgse(d, ModelConfig(latent_dim=4, hidden=(16,)), RngStream(1))
        trace = train_dgse(model, d, TrainingConfig(epochs=30, batch_size=64), RngStream(2))
        assert len(trace.objective) == 30
        assert trace.window_mean(0.1, last=True) > trace.window_mean(0.1, last=False)
        assert np.isfinite(dgse_ate(model, d, 10, RngStream(3)))

    def test_checkpoint_round_trip(self, tmp_path):
        model = _model()
        path = model.save(tmp_path / "dgse.npz", {"seed": 4})
        loaded = DgseModel.from_checkpoint(path)
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(
            dgse_ite_batch(loaded, x, 15, RngStream(1)).ite, dgse_ite_batch(model, x, 15, RngStream(1)).ite
        )
        assert loaded.config == model.config

    def test_checkpoint_of_other_model(self, tmp_path):
        from src.services.diffnet import MlpFunction, save_checkpoint

        path = save_checkpoint(tmp_path / "x.npz", {"n": MlpFunction(1, [], {"o": 1})}, {"model": "dmse"})
        with pytest.raises(StateError):
            DgseModel.from_checkpoint(path)
