"""
Tests for the synthetic data-generating processes and the dataset directory format
"""
import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import expit

from src.services.datagen import (
    GLYPHS,
    GwasParams,
    ToyParams,
    closed_form_noncausal_ate,
    drop_modalities,
    enumerate_true_ate,
    gen_dataset_a_to_e,
    gen_gwas_spatial,
    gen_toy,
    load_dataset,
    render_glyphs,
    save_dataset,
    split_dataset,
    toy_true_ite,
)
from src.utils.errors import DatasetFormatError, MissingModalityError
from src.utils.rng import RngStream


class TestToy:
    def test_closed_form_noncausal_exact_marginal(self):
        np.testing.assert_allclose(closed_form_noncausal_ate(ToyParams()), -0.0915835, atol=1e-6)

    def test_closed_form_noncausal_complement_marginal(self):
        np.testing.assert_allclose(closed_form_noncausal_ate(ToyParams(), "complement"), -0.320517, atol=1e-5)

    def test_closed_form_unknown_marginal(self):
        with pytest.raises(ValueError):
            closed_form_noncausal_ate(ToyParams(), "other")

    def test_true_ite_values(self):
        np.testing.assert_allclose(toy_true_ite(ToyParams(), np.array([1, 0])), [-0.5, 0.125])

    def test_true_ite_averages_to_zero(self):
        params = ToyParams()
        p_one = 0.5 * (params.rho_x0 + params.rho_x1)
        ite = toy_true_ite(params, np.array([1, 0]))
        np.testing.assert_allclose(p_one * ite[0] + (1 - p_one) * ite[1], 0.0, atol=1e-12)

    def test_outcome_is_xor(self):
        d = gen_toy(ToyParams(n=500), False, RngStream(0))
        z = d.truth.confounder_z[:, 0]
        np.testing.assert_array_equal(d.outcome, np.logical_xor(d.treatment, z).astype(float))
        assert d.truth.true_ate == 0.0

    def test_deterministic(self):
        a = gen_toy(ToyParams(n=200), True, RngStream(3))
        b = gen_toy(ToyParams(n=200), True, RngStream(3))
        np.testing.assert_array_equal(a.modalities["image"], b.modalities["image"])
        np.testing.assert_array_equal(a.treatment, b.treatment)

    def test_conditionals_match_parameters(self):
        params = ToyParams(n=100000)
        d = gen_toy(params, False, RngStream(1))
        z = d.truth.confounder_z[:, 0] == 1
        x, t = d.modalities["x"][:, 0], d.treatment
        for observed, rows, expected in (
            (x, z, params.rho_x1), (x, ~z, params.rho_x0), (t, z, params.rho_t1), (t, ~z, params.rho_t0),
        ):
            se = np.sqrt(expected * (1 - expected) / rows.sum())
            assert abs(observed[rows].mean() - expected) <= 3 * se

    def test_image_proxy_shape(self):
        d = gen_toy(ToyParams(n=10), True, RngStream(0))
        assert d.modalities["image"].shape == (10, 256)
        assert d.modality_kinds["image"] == "bernoulli"


class TestGlyphs:
    def test_no_flips_reproduces_stencil(self):
        images = render_glyphs(np.array([0, 1, 1]), RngStream(0), flip=0.0)
        np.testing.assert_array_equal(images[0], GLYPHS[0])
        np.testing.assert_array_equal(images[2], GLYPHS[1])

    def test_stencils_differ(self):
        assert np.sum(GLYPHS[0] != GLYPHS[1]) > 20


class TestDatasetsAToE:
    def test_enumerated_truth(self):
        assert enumerate_true_ate("A") == 0.0
        assert enumerate_true_ate("B") == 0.0
        assert enumerate_true_ate("D") == 0.0
        np.testing.assert_allclose(enumerate_true_ate("E", 1), expit(5.0) - expit(1.0))

    def test_dataset_c_matches_interventional_monte_carlo(self):
        d = gen_dataset_a_to_e("C", 200000, RngStream(2))
        z = np.logical_xor(d.truth.confounder_z[:, 0], d.truth.confounder_z[:, 1]).astype(int)
        x2 = d.observed_confounder[:, 0].astype(int)
        effect = 1.0 - 2.0 * np.bitwise_xor(x2, z)
        assert abs(effect.mean() - enumerate_true_ate("C")) <= 0.01

    def test_dataset_e_true_ite_mean(self):
        d = gen_dataset_a_to_e("E", 50000, RngStream(4), m_modalities=2)
        assert abs(d.truth.true_ite.mean() - enumerate_true_ate("E", 2)) <= 0.01
        assert d.modality_names == ["x1", "x2"]

    def test_modalities_per_dataset(self):
        rng = RngStream(0)
        assert gen_dataset_a_to_e("A", 50, rng).modality_names == ["x1", "x2"]
        assert gen_dataset_a_to_e("b", 50, rng).observed_confounder.shape == (50, 1)
        assert gen_dataset_a_to_e("D", 50, rng).modality_names == ["x1", "x2", "x3"]

    def test_unknown_dataset(self):
        with pytest.raises(ValueError):
            gen_dataset_a_to_e("F", 10, RngStream(0))

    def test_drop_fraction(self):
        d = drop_modalities(gen_dataset_a_to_e("A", 10000, RngStream(0)), "x1", 0.5, RngStream(1))
        assert 4800 <= d.missing_mask["x1"].sum() <= 5200
        assert not d.missing_mask["x2"].any()

    def test_drop_unknown_modality(self):
        with pytest.raises(MissingModalityError):
            drop_modalities(gen_dataset_a_to_e("A", 10, RngStream(0)), "x9", 0.5, RngStream(1))


class TestGwas:
    def test_shapes_and_effects(self):
        params = GwasParams(n_individuals=400, n_snps=8, n_causal=3)
        d = gen_gwas_spatial(params, RngStream(0))
        assert d.modalities["snps"].shape == (400, 8)
        assert d.modalities["timeseries"].shape == (400, params.n_samples)
        effects = d.truth.causal_effects
        assert np.count_nonzero(effects) == 3
        magnitudes = np.abs(effects[effects != 0])
        assert np.all((magnitudes >= params.effect_low) & (magnitudes <= params.effect_high))
        assert set(np.unique(d.modalities["snps"])) <= {0.0, 1.0, 2.0, 3.0}

    def test_series_identical_within_cluster(self):
        d = gen_gwas_spatial(GwasParams(n_individuals=300), RngStream(1))
        cluster = d.truth.cluster_id
        series = d.modalities["timeseries"]
        for k in np.unique(cluster):
            members = series[cluster == k]
            np.testing.assert_array_equal(members, np.broadcast_to(members[0], members.shape))

    def test_noiseless_regression_recovers_effects(self):
        params = GwasParams(n_individuals=500, noise_scale=0.0, confounding_strength=0.0)
        d = gen_gwas_spatial(params, RngStream(2))
        causal = np.flatnonzero(d.truth.causal_effects)
        coef, *_ = np.linalg.lstsq(d.treatment[:, causal], d.outcome, rcond=None)
        np.testing.assert_allclose(coef, d.truth.causal_effects[causal], atol=1e-8)

    def test_parameter_validation(self):
        with pytest.raises(ValidationError):
            GwasParams(n_snps=2, n_causal=3)
        with pytest.raises(ValidationError):
            GwasParams(n_clusters=4)


class TestSplitsAndFiles:
    def test_split_sizes_are_disjoint(self):
        d = gen_toy(ToyParams(n=1000), False, RngStream(0))
        parts = split_dataset(d, (0.63, 0.27, 0.10), RngStream(1))
        assert [parts[k].n_rows for k in ("train", "val", "test")] == [630, 270, 100]

    def test_split_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            split_dataset(gen_toy(ToyParams(n=10), False, RngStream(0)), (0.5, 0.2, 0.2), RngStream(1))

    def test_gwas_directory_round_trip(self, tmp_path):
        d = gen_gwas_spatial(GwasParams(n_individuals=60, n_snps=4), RngStream(3))
        loaded = load_dataset(save_dataset(d, tmp_path / "gwas"))
        np.testing.assert_array_equal(loaded.treatment, d.treatment)
        np.testing.assert_array_equal(loaded.outcome, d.outcome)
        np.testing.assert_array_equal(loaded.truth.causal_effects, d.truth.causal_effects)
        np.testing.assert_array_equal(loaded.truth.cluster_id, d.truth.cluster_id)
        assert loaded.modality_kinds == d.modality_kinds
        assert loaded.treatment_kind == "snp"

    def test_masks_survive_round_trip(self, tmp_path):
        d = drop_modalities(gen_dataset_a_to_e("A", 40, RngStream(0)), "x1", 0.5, RngStream(1))
        loaded = load_dataset(save_dataset(d, tmp_path / "a"))
        np.testing.assert_array_equal(loaded.missing_mask["x1"], d.missing_mask["x1"])
        np.testing.assert_array_equal(loaded.truth.true_ite, d.truth.true_ite)
        assert loaded.truth.true_ate == 0.0

    def test_missing_metadata(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)
