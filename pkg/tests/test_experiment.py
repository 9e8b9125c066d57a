"""
Tests for experiment configs, the run harness and report summaries
"""
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.services import experiment_service as harness
from src.services.datagen import load_dataset
from src.services.dgse_service import DgseModel
from src.services.dmse_service import DmseModel
from src.services.experiment_config import ExperimentConfig
from src.services.experiment_service import ReportRow, rows_to_frame, summarize, summarize_frame
from src.utils.errors import ConfigError, ReportError
from src.utils.rng import RngStream

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

TOY = """
[experiment]
name = toy_small
seeds = 0, 1

[generator]
kind = toy
n = 2000

[model:ols]

[model:noncausal]

[model:oracle_adjust]
"""


def _config(text: str) -> ExperimentConfig:
    return ExperimentConfig.from_text(text)


def _linsem(setting: str, models: str = "[model:ols]\n[model:external]\nkind = linsem_external\n") -> ExperimentConfig:
    return _config(f"[experiment]\nname = l\nseeds = 0\n[generator]\nkind = linsem\n[setting:s]\n{setting}\n{models}")


class TestConfigParsing:
    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.ini")), ids=lambda p: p.stem)
    def test_shipped_configs_parse(self, path):
        config = ExperimentConfig.from_file(path)
        assert config.models and config.seeds

    def test_beta_sweep_labels(self):
        config = ExperimentConfig.from_file(CONFIG_DIR / "beta_sweep.ini")
        labels = [spec.label for spec in config.models]
        assert labels[0] == "dmse[beta=0.1]"
        assert len(labels) == 6
        assert config.models[0].model.beta == 0.1

    def test_per_model_training_overrides(self):
        config = ExperimentConfig.from_file(CONFIG_DIR / "propensity_instability.ini")
        specs = {spec.label: spec for spec in config.models}
        assert specs["iptw_unclamped"].training.epochs == 300
        assert specs["iptw_unclamped"].flag("clamp", True) is False
        assert specs["dgse"].training.lr == 0.005
        assert specs["dgse"].training.epochs == 50

    def test_kind_defaults_to_label(self):
        assert [spec.kind for spec in _config(TOY).models] == ["ols", "noncausal", "oracle_adjust"]

    @pytest.mark.parametrize(
        "text",
        [
            "[generator]\nkind = toy\n[model:ols]\n",
            TOY + "[surprise]\nx = 1\n",
            TOY + "[model:bad]\nkind = bogus\n",
            TOY.replace("seeds = 0, 1", "seeds = 0, 0"),
            TOY.replace("n = 2000", "n = 2000\nwidth = 3"),
            TOY + "[splits]\ntrain = 0.5\nval = 0.5\ntest = 0.5\n",
            TOY + "[model:x]\nkind = linsem_external\n",
            "[experiment]\nseeds = 0\n[generator]\nkind = linsem\n[model:dgse]\n",
            "not an ini file",
        ],
        ids=[
            "no-experiment", "unknown-section", "bad-kind", "duplicate-seeds", "unknown-generator-key",
            "bad-splits", "kind-not-supported", "dgse-on-linsem", "unparseable",
        ],
    )
    def test_invalid_configs(self, text):
        with pytest.raises(ConfigError):
            _config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(tmp_path / "absent.ini")

    def test_bad_flag(self):
        spec = _config(TOY + "[model:iptw]\nclamp = maybe\n").models[-1]
        with pytest.raises(ConfigError):
            spec.flag("clamp", True)

    def test_echo_resolves_defaults(self):
        echo = _config(TOY).echo()
        assert echo["model.ols.kind"] == "ols"
        assert echo["setting.default.n"] == "2000"
        assert echo["setting.default.image_proxy"] == "False"
        assert echo["experiment.record_runtime"] == "false"
        assert echo["model.ols.training.epochs"] == "50"


class TestSummaries:
    @staticmethod
    def _frame(values, failed: int = 0):
        rows = [ReportRow(i, "m", "s", ate_err_test=v) for i, v in enumerate(values)]
        rows += [ReportRow(100 + i, "m", "s", "error: DomainError: x") for i in range(failed)]
        return rows_to_frame(rows)

    def test_single_value_has_no_standard_error(self):
        summary = summarize_frame(self._frame([0.5]))
        assert summary.loc[0, "ate_err_test_mean"] == 0.5
        assert np.isnan(summary.loc[0, "ate_err_test_sem"])

    def test_identical_values(self):
        assert summarize_frame(self._frame([0.2, 0.2, 0.2])).loc[0, "ate_err_test_sem"] == 0.0

    def test_mean_sem_median(self):
        summary = summarize_frame(self._frame([1.0, 2.0, 3.0], failed=2))
        row = summary.loc[0]
        assert row["ate_err_test_mean"] == 2.0
        assert row["ate_err_test_sem"] == pytest.approx(1.0 / np.sqrt(3.0))
        assert row["ate_err_test_median"] == 2.0
        assert (row["n_ok"], row["n_failed"]) == (3, 2)

    def test_summarize_files(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        self._frame([1.0]).to_csv(a, index=False)
        self._frame([3.0]).to_csv(b, index=False)
        summary = summarize([a, b], tmp_path / "out")
        assert summary.loc[0, "ate_err_test_mean"] == 2.0
        assert (tmp_path / "out" / "summary.txt").exists()

    def test_summarize_rejects_mismatched_columns(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        self._frame([1.0]).to_csv(a, index=False)
        self._frame([1.0]).drop(columns=["r2"]).to_csv(b, index=False)
        with pytest.raises(ReportError):
            summarize([a, b])

    def test_summarize_needs_reports(self, tmp_path):
        with pytest.raises(ReportError):
            summarize([])
        with pytest.raises(ReportError):
            summarize([tmp_path / "missing.csv"])


class TestRun:
    def test_reruns_are_byte_identical_across_job_counts(self, tmp_path):
        config = _config(TOY)
        harness.run(config, tmp_path / "serial", jobs=1)
        harness.run(config, tmp_path / "parallel", jobs=2)
        for name in ("report.csv", "summary.csv", "run_metadata.txt"):
            assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()
        assert "run.no_clamp = false\n" in (tmp_path / "serial" / "run_metadata.txt").read_text()

    def test_toy_rows(self):
        result = harness.run(_config(TOY))
        assert result.failed == 0
        assert list(result.report["seed"]) == [0, 0, 0, 1, 1, 1]
        assert result.report["runtime_seconds"].isna().all()
        oracle = result.report[result.report["model"] == "oracle_adjust"]
        assert (oracle["ate_err_test"] < 0.35).all()

    def test_record_runtime(self):
        result = harness.run(_config(TOY.replace("seeds = 0, 1", "seeds = 0\nrecord_runtime = true")))
        assert (result.report["runtime_seconds"] >= 0).all()

    def test_unknown_proxy_is_an_error_row(self):
        report = harness.run(_config(TOY + "[model:bad_proxy]\nkind = noncausal\nproxy = nope\n")).report
        bad = report[report["model"] == "bad_proxy"]
        assert len(bad) == 2
        assert bad["status"].str.startswith("error: KeyError").all()
        assert (report[report["model"] != "bad_proxy"]["status"] == "ok").all()

    def test_runtime_failure_keeps_its_type(self, monkeypatch):
        def fail(_):
            raise RuntimeError("solver gave up")

        monkeypatch.setattr(harness.baselines, "ols_ate", fail)
        report = harness.run(_config(TOY)).report.set_index(["seed", "model"])
        assert report.loc[(0, "ols"), "status"] == "error: RuntimeError: solver gave up"
        assert report.loc[(1, "ols"), "status"] == "error: RuntimeError: solver gave up"
        assert report.loc[(0, "noncausal"), "status"] == "ok"

    def test_linsem_ols_bias_depends_on_proxy_noise(self):
        noisy = harness.run(_linsem("n = 20000", "[model:ols]")).report
        clean = harness.run(_linsem("n = 20000\nproxy_noise = 1e-12", "[model:ols]")).report
        assert noisy.loc[0, "ate_err_train"] > 0.2
        assert clean.loc[0, "ate_err_train"] < 0.1

    def test_population_ols_is_an_error_row(self):
        report = harness.run(_linsem("sem = reference")).report.set_index("model")
        assert report.loc["ols", "status"].startswith("error: ConfigError")
        assert report.loc["external", "status"] == "ok"
        assert report.loc["external", "ate_err_train"] <= 1e-8

    def test_random_population_recovery(self):
        models = "[model:external]\nkind = linsem_external\n[model:three_view]\nkind = linsem_three_view\n"
        report = harness.run(_linsem("sem = random\ndim_u = 2\nproxy_dim = 3", models)).report
        assert (report["status"] == "ok").all()
        assert (report["ate_err_train"] < 1e-6).all()

    def test_small_gwas(self):
        config = _config(
            "[experiment]\nname = g\nseeds = 0\n"
            "[generator]\nkind = gwas\nn_individuals = 300\nn_snps = 5\n"
            "[model:ols]\n[model:oracle_adjust]\n"
            "[model:pca]\nkind = pca_adjust\nk = 2\n"
            "[model:fa]\nkind = fa_adjust\nk = 1\n"
            "[model:dmse]\nlatent_dim = 2\nhidden = 8\nepochs = 2\n"
        )
        report = harness.run(config).report
        assert (report["status"] == "ok").all()
        counts = report[["tp", "fp", "tn", "fn"]].sum(axis=1)
        assert (counts == 5).all()

    def test_gwas_dmse_latent_means_and_samples(self):
        config = _config(
            "[experiment]\nname = g\nseeds = 0\n"
            "[generator]\nkind = gwas\nn_individuals = 300\nn_snps = 5\n"
            "[model:means]\nkind = dmse\nlatent_dim = 2\nhidden = 8\nepochs = 2\n"
            "[model:drawn]\nkind = dmse\nlatent_dim = 2\nhidden = 8\nepochs = 2\nsample_latents = true\n"
        )
        means, drawn = config.models
        assert drawn.flag("sample_latents", False) and not means.flag("sample_latents", False)
        dataset = harness.generate(config, "default", 0).dataset
        mean_scores = harness.gwas_confounder_scores(means, dataset, RngStream(7))
        drawn_scores = harness.gwas_confounder_scores(drawn, dataset, RngStream(7))
        assert mean_scores.shape == drawn_scores.shape == (300, 2)
        assert not np.allclose(mean_scores, drawn_scores)
        np.testing.assert_array_equal(drawn_scores, harness.gwas_confounder_scores(drawn, dataset, RngStream(7)))
        report = harness.run(config).report
        assert (report["status"] == "ok").all()


class TestSingleSteps:
    DEEP = """
[experiment]
name = deep
seeds = 3

[generator]
kind = toy
n = 300

[model:dgse]
latent_dim = 2
hidden = 8
epochs = 2
"""

    def test_generate_train_estimate_score(self, tmp_path):
        config = _config(self.DEEP)
        data_dir = harness.generate_to_directory(config, 3, tmp_path / "data")
        paths = harness.train_to_directory(config, 3, tmp_path / "train", dataset=load_dataset(data_dir))
        assert paths["dgse_trace"].exists()
        model = harness.load_model(paths["dgse"])
        assert isinstance(model, DgseModel)
        test = load_dataset(paths["data_test"])
        estimates = harness.estimate(model, test, 5, seed=0)
        assert list(estimates.columns) == ["row", "ite", "stderr"]
        assert len(estimates) == test.n_rows
        scores = harness.score_estimates(estimates, test)
        assert set(scores) == {"ate", "ate_err", "ite_rmse"}

    def test_dmse_estimates_report_subsets(self, tmp_path):
        config = _config(
            "[experiment]\nname = d\nseeds = 0\n[generator]\nkind = dataset\nwhich = A\nn = 200\n"
            "[model:dmse]\nlatent_dim = 2\nhidden = 8\nepochs = 1\n"
        )
        paths = harness.train_to_directory(config, 0, tmp_path)
        model = harness.load_model(paths["dmse"])
        assert isinstance(model, DmseModel)
        estimates = harness.estimate(model, load_dataset(paths["data_test"]), 3, seed=1)
        assert set(estimates["subset_used"]) == {"x1+x2"}

    def test_population_linsem_cannot_be_generated(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.generate_to_directory(_linsem("sem = reference"), 0, tmp_path)

    def test_training_needs_a_deep_model(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.train_to_directory(_config(TOY), 0, tmp_path)

    def test_score_needs_estimate_column(self):
        with pytest.raises(ReportError):
            harness.score_estimates(pd.DataFrame({"x": [1.0]}), None)
