"""
Experiment harness: generate, split, fit, estimate and score for every seed, then summarize
"""
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.services import baselines_service as baselines
from src.services.datagen import (
    Dataset,
    drop_modalities,
    gen_dataset_a_to_e,
    gen_gwas_spatial,
    gen_toy,
    save_dataset,
    split_dataset,
)
from src.services.dgse_service import (
    DgseModel,
    build_dgse,
    dgse_ate,
    dgse_ite_batch,
    single_modality,
    train_dgse,
    zero_impute_modalities,
)
from src.services.diffnet import load_checkpoint
from src.services.dmse_service import (
    DmseModel,
    build_dmse,
    dmse_ate,
    dmse_ite_batch,
    dmse_latents,
    make_batch,
    train_dmse,
)
from src.services.experiment_config import ExperimentConfig, ModelSpec
from src.services.linsem_service import (
    CovSet,
    LinearSem,
    covariances_from_dataset,
    population_covariances,
    reduce_proxy,
    simulate_linear_sem,
    tau_three_view,
    tau_with_external_info,
)
from src.services.metrics import ate_error, gwas_score, r_squared
from src.utils.config import get_settings
from src.utils.errors import ConfigError, ReportError, StateError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

REPORT_FLOAT_FORMAT = "%.10g"
REPORT_COLUMNS = [
    "seed", "model", "setting", "status",
    "ate_train", "ate_test", "ate_err_train", "ate_err_test",
    "l1", "l2", "tp", "fp", "tn", "fn", "precision", "recall", "r2",
    "runtime_seconds",
]
METRIC_COLUMNS = REPORT_COLUMNS[4:]
DEEP_KINDS = ("dgse", "dmse", "dmse_v")


@dataclass
class ReportRow:
    seed: int
    model: str
    setting: str
    status: str = "ok"
    ate_train: Optional[float] = None
    ate_test: Optional[float] = None
    ate_err_train: Optional[float] = None
    ate_err_test: Optional[float] = None
    l1: Optional[float] = None
    l2: Optional[float] = None
    tp: Optional[int] = None
    fp: Optional[int] = None
    tn: Optional[int] = None
    fn: Optional[int] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    r2: Optional[float] = None
    runtime_seconds: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Generated:
    """One synthetic draw: a dataset, plus the sem behind it for linear-sem experiments"""

    dataset: Optional[Dataset]
    sem: Optional[LinearSem] = None


@dataclass
class RunResult:
    rows: List[ReportRow]
    report: pd.DataFrame
    summary: pd.DataFrame
    paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def failed(self) -> int:
        return int(sum(row.status != "ok" for row in self.rows))


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def setting_stream(seed: int, setting: str) -> RngStream:
    """Root stream of one (seed, setting) cell: child(0) data, child(1) split, child(2) models"""
    return RngStream(seed).child(_key(setting))


def generate(config: ExperimentConfig, setting: str, seed: int) -> Generated:
    params = config.generator_config(setting)
    rng = setting_stream(seed, setting).child(0)
    if config.generator == "toy":
        return Generated(gen_toy(params, params.image_proxy, rng))
    if config.generator == "dataset":
        dataset = gen_dataset_a_to_e(params.which, params.n, rng, params.m_modalities)
        if params.drop_modality and params.drop_fraction > 0:
            dataset = drop_modalities(dataset, params.drop_modality, params.drop_fraction, rng.child(1))
        return Generated(dataset)
    if config.generator == "gwas":
        return Generated(gen_gwas_spatial(params, rng))
    if params.sem == "reference":
        sem = LinearSem.reference()
        if params.beta_yx is not None:
            sem.beta_YX = params.beta_yx
    else:
        sem = LinearSem.random(params.dim_u, params.proxy_dim, rng.child(1), params.beta_yx)
    sem.noise_W = sem.noise_Z = sem.noise_V = params.proxy_noise
    dataset = simulate_linear_sem(sem, params.n, rng.child(2), params.binary_treatment) if params.n else None
    return Generated(dataset, sem)


def _true_ate(dataset: Dataset) -> Optional[float]:
    truth = dataset.truth
    return None if truth is None or truth.true_ate is None else truth.true_ate


def _restrict(dataset: Dataset, spec: ModelSpec) -> Dataset:
    names = spec.names("modalities")
    return dataset if names is None else dataset.select_modalities(names)


def _noncausal_proxy(dataset: Dataset, spec: ModelSpec) -> np.ndarray:
    """Stratification variable: a named modality, the proxy state, or the only scalar modality"""
    choice = spec.option("proxy")
    if choice is None:
        scalar = [n for n in dataset.modality_names if dataset.modality_dim(n) == 1]
        choice = scalar[0] if len(dataset.modality_names) == 1 and scalar else "state"
    if choice == "state":
        if dataset.truth is None or dataset.truth.proxy_state is None:
            raise StateError("dataset records no proxy state to stratify on")
        return dataset.truth.proxy_state
    return dataset.modalities[choice]


def _oracle_confounder(dataset: Dataset) -> np.ndarray:
    if dataset.truth is None or dataset.truth.confounder_z is None:
        raise StateError("dataset records no true confounder")
    z = dataset.truth.confounder_z
    if dataset.observed_confounder is not None:
        z = np.hstack([z, dataset.observed_confounder])
    return z


def _without_confounder(dataset: Dataset) -> Dataset:
    return Dataset(
        modalities=dataset.modalities,
        treatment=dataset.treatment,
        outcome=dataset.outcome,
        modality_kinds=dataset.modality_kinds,
        missing_mask=dataset.missing_mask,
    )


def fit_effect_model(
    spec: ModelSpec, parts: Dict[str, Dataset], rng: RngStream, no_clamp: bool = False
) -> Tuple[float, float]:
    """
    Fit one estimator on the train split and return (ATE on train, ATE on test).

    Estimators with a constant effect (ols, pca_adjust, fa_adjust) report the
    same value for both splits.
    """
    train, test = _restrict(parts["train"], spec), _restrict(parts["test"], spec)
    n_samples = spec.training.n_ite_samples
    kind = spec.kind

    if kind == "dgse":
        if len(train.modalities) > 1:
            train, test = zero_impute_modalities(train), zero_impute_modalities(test)
        model = build_dgse(train, spec.model, rng.child(0))
        train_dgse(model, train, spec.training, rng.child(1))
        return dgse_ate(model, train, n_samples, rng.child(2)), dgse_ate(model, test, n_samples, rng.child(3))

    if kind in ("dmse", "dmse_v"):
        model = build_dmse(train, spec.model, rng.child(0), use_confounder=kind == "dmse_v")
        train_dmse(model, train, spec.training, rng.child(1))
        subset = spec.names("ite_subset")
        return (
            dmse_ate(model, train, n_samples, rng.child(2), subset),
            dmse_ate(model, test, n_samples, rng.child(3), subset),
        )

    if kind == "ols":
        ate = baselines.ols_ate(train)
        return ate, ate

    if kind in ("iptw", "aiptw"):
        clamp = spec.flag("clamp", True) and not no_clamp
        prop = baselines.fit_propensity(train, spec.training, rng.child(0), clamp=clamp)
        if kind == "iptw":
            return baselines.iptw_ate(train, prop), baselines.iptw_ate(test, prop)
        outcome_models = baselines.fit_outcome_models(train, spec.training, rng.child(1))
        return baselines.aiptw_ate(train, prop, outcome_models), baselines.aiptw_ate(test, prop, outcome_models)

    if kind == "noncausal":
        return tuple(
            baselines.empirical_noncausal_ate(_noncausal_proxy(part, spec), part.treatment, part.outcome)
            for part in (train, test)
        )

    if kind == "oracle_adjust":
        return tuple(
            baselines.empirical_noncausal_ate(_oracle_confounder(part), part.treatment, part.outcome)
            for part in (train, test)
        )

    if kind in ("pca_adjust", "fa_adjust"):
        features = baselines.feature_matrix(_without_confounder(train))
        adjustment = baselines.fit_latent_adjustment(
            features, "pca" if kind == "pca_adjust" else "fa", int(spec.option("k", "1"))
        )
        covariates = adjustment.scores
        if train.observed_confounder is not None:
            covariates = np.hstack([covariates, train.observed_confounder])
        ate = baselines.ols_effect(covariates, train.treatment, train.outcome)
        return ate, ate

    raise ConfigError(f"model kind '{kind}' does not estimate an ATE")


def gwas_confounder_scores(spec: ModelSpec, dataset: Dataset, rng: RngStream) -> Optional[np.ndarray]:
    """Adjustment covariates for the per-SNP regressions of one GWAS estimator"""
    kind = spec.kind
    if kind == "ols":
        return None
    if kind == "oracle_adjust":
        return _oracle_confounder(dataset)
    if kind in ("pca_adjust", "fa_adjust"):
        data = dataset.modalities[spec.option("modality", "snps")]
        return baselines.fit_latent_adjustment(
            data, "pca" if kind == "pca_adjust" else "fa", int(spec.option("k", "1"))
        ).scores
    if kind == "dmse":
        proxies = _restrict(dataset, spec)
        model = build_dmse(proxies, spec.model, rng.child(0), causal_heads=False)
        train_dmse(model, proxies, spec.training, rng.child(1))
        return dmse_latents(
            model,
            proxies,
            per_modality=spec.flag("per_modality", False),
            sample=spec.flag("sample_latents", False),
            rng=rng.child(2),
        )
    raise ConfigError(f"model kind '{kind}' cannot adjust a GWAS")


def score_gwas(gamma: np.ndarray, dataset: Dataset) -> Dict[str, float]:
    """gwas_score against the true effects plus R² of the centered SNP prediction"""
    if dataset.truth is None or dataset.truth.causal_effects is None:
        raise StateError("dataset records no true SNP effects")
    score = gwas_score(gamma, dataset.truth.causal_effects).as_dict()
    score.pop("threshold")
    snps = dataset.treatment
    predicted = (snps - snps.mean(axis=0)) @ np.nan_to_num(gamma) + dataset.outcome.mean()
    score["r2"] = r_squared(predicted, dataset.outcome)
    return score


def _project(cov: CovSet, transforms: Dict[str, np.ndarray]) -> CovSet:
    """Covariances of the linearly reduced proxies T_W W, T_Z Z, T_V V"""
    width = cov.sigma_XW.size
    tw = transforms.get("W", np.eye(width))
    projected = CovSet(cov.sigma_XY, cov.sigma_XX, tw @ cov.sigma_XW, tw @ cov.sigma_YW)
    if cov.has_three_views:
        tz = transforms.get("Z", np.eye(cov.sigma_WZ.shape[1]))
        tv = transforms.get("V", np.eye(cov.sigma_VW.shape[0]))
        projected.sigma_VW = tv @ cov.sigma_VW @ tw.T
        projected.sigma_WZ = tw @ cov.sigma_WZ @ tz.T
        projected.sigma_VZ = tv @ cov.sigma_VZ @ tz.T
    return projected


def linsem_estimate(spec: ModelSpec, generated: Generated) -> float:
    sem, data = generated.sem, generated.dataset
    du = sem.dim_u
    if spec.kind == "ols":
        if data is None:
            raise ConfigError("ols needs sampled linear-sem data (n > 0)")
        return baselines.ols_effect(data.modalities["W"], data.treatment, data.outcome)

    cov = population_covariances(sem) if data is None else covariances_from_dataset(data)
    if spec.kind == "linsem_external":
        reduction = reduce_proxy(sem.beta_WU, du, beta=True)
        return tau_with_external_info(_project(cov, {"W": reduction.transform}), reduction.reduced, sem.sigma_UU)

    if data is None:
        # leading coordinates keep full rank for generic mechanisms
        transforms = {name: np.eye(du, getattr(sem, f"beta_{name}U").shape[0]) for name in ("W", "Z", "V")}
    else:
        transforms = {name: reduce_proxy(data.modalities[name], du).transform for name in ("W", "Z", "V")}
    return tau_three_view(_project(cov, transforms))


def _score_model(
    config: ExperimentConfig,
    spec: ModelSpec,
    generated: Generated,
    parts: Optional[Dict[str, Dataset]],
    row: ReportRow,
    rng: RngStream,
    no_clamp: bool,
) -> None:
    if config.generator == "linsem":
        tau = linsem_estimate(spec, generated)
        row.ate_train = tau
        row.ate_err_train = ate_error(tau, generated.sem.beta_YX)
        return
    if config.generator == "gwas":
        dataset = generated.dataset
        gamma = baselines.per_snp_effect(dataset.outcome, dataset.treatment,
                                         gwas_confounder_scores(spec, dataset, rng))
        for key, value in score_gwas(gamma, dataset).items():
            setattr(row, key, value)
        return
    ate_train, ate_test = fit_effect_model(spec, parts, rng, no_clamp)
    row.ate_train, row.ate_test = ate_train, ate_test
    truth = _true_ate(parts["train"])
    if truth is not None:
        row.ate_err_train = ate_error(ate_train, truth)
        row.ate_err_test = ate_error(ate_test, truth)


def _status(exc: Exception) -> str:
    return " ".join(f"error: {type(exc).__name__}: {exc}".split())


def run_seed(config: ExperimentConfig, seed: int, no_clamp: bool = False) -> List[ReportRow]:
    rows: List[ReportRow] = []
    for setting in config.settings:
        root = setting_stream(seed, setting)
        logger.info("Step 1: generating %s data (seed %d, setting %s)", config.generator, seed, setting)
        try:
            generated = generate(config, setting, seed)
            parts = None
            if config.generator in ("toy", "dataset"):
                parts = split_dataset(generated.dataset, config.splits, root.child(1))
        except Exception as exc:  # recorded per row; the run goes on
            logger.warning("seed %d setting %s: generation failed: %s", seed, setting, exc)
            rows.extend(ReportRow(seed, spec.label, setting, _status(exc)) for spec in config.models)
            continue

        for spec in config.models:
            row = ReportRow(seed, spec.label, setting)
            logger.info("Step 2: fitting %s (seed %d, setting %s)", spec.label, seed, setting)
            started = time.perf_counter()
            try:
                _score_model(config, spec, generated, parts, row, root.child(2).child(_key(spec.label)), no_clamp)
            except Exception as exc:  # recorded per row; the run goes on
                logger.warning("seed %d %s/%s failed: %s", seed, spec.label, setting, exc)
                row = ReportRow(seed, spec.label, setting, _status(exc))
            if config.record_runtime:
                row.runtime_seconds = time.perf_counter() - started
            rows.append(row)
    return rows


def rows_to_frame(rows: Sequence[ReportRow]) -> pd.DataFrame:
    return pd.DataFrame([row.as_dict() for row in rows], columns=REPORT_COLUMNS)


def summarize_frame(report: pd.DataFrame) -> pd.DataFrame:
    """
    Mean, standard error of the mean and median of every metric per
    (model, setting), over rows with status ok. A single value leaves the
    standard error blank.
    """
    records = []
    for (model, setting), group in report.groupby(["model", "setting"], sort=False):
        ok = group[group["status"] == "ok"]
        record = {"model": model, "setting": setting, "n_ok": len(ok), "n_failed": len(group) - len(ok)}
        for column in METRIC_COLUMNS:
            values = pd.to_numeric(ok[column], errors="coerce").dropna().to_numpy(dtype=float)
            if values.size == 0:
                record.update({f"{column}_mean": np.nan, f"{column}_sem": np.nan, f"{column}_median": np.nan})
                continue
            sem = values.std(ddof=1) / np.sqrt(values.size) if values.size > 1 else np.nan
            record.update({
                f"{column}_mean": values.mean(),
                f"{column}_sem": sem,
                f"{column}_median": float(np.median(values)),
            })
        records.append(record)
    return pd.DataFrame(records)


def _cell(mean: float, sem: float) -> str:
    if pd.isna(mean):
        return ""
    return f"{mean:.4f}" if pd.isna(sem) else f"{mean:.4f} ({sem:.4f})"


def format_summary(summary: pd.DataFrame, metric: Optional[str] = None) -> str:
    """
    Aligned text: one line per (model, setting) with mean (sem) of every
    reported metric, then a model × setting grid of `metric`.
    """
    present = [c for c in METRIC_COLUMNS if f"{c}_mean" in summary and summary[f"{c}_mean"].notna().any()]
    table = pd.DataFrame({
        "model": summary["model"],
        "setting": summary["setting"],
        "n": summary["n_ok"].astype(int),
        **{c: [_cell(m, s) for m, s in zip(summary[f"{c}_mean"], summary[f"{c}_sem"])] for c in present},
    })
    text = table.to_string(index=False)
    metric = metric or next((c for c in ("ate_err_test", "l1", "ate_err_train") if c in present), None)
    if metric is not None:
        grid = pd.DataFrame(
            {setting: {row["model"]: _cell(row[f"{metric}_mean"], row[f"{metric}_sem"])
                       for _, row in summary[summary["setting"] == setting].iterrows()}
             for setting in summary["setting"].unique()}
        ).fillna("")
        grid.index.name = metric
        text += "\n\n" + grid.to_string()
    return text + "\n"


def _write_reports(report: pd.DataFrame, summary: pd.DataFrame, out_dir: Path) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out_dir / "report.csv",
        "summary": out_dir / "summary.csv",
        "summary_text": out_dir / "summary.txt",
    }
    report.to_csv(paths["report"], index=False, float_format=REPORT_FLOAT_FORMAT)
    summary.to_csv(paths["summary"], index=False, float_format=REPORT_FLOAT_FORMAT)
    paths["summary_text"].write_text(format_summary(summary))
    return paths


def run(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    jobs: Optional[int] = None,
    no_clamp: bool = False,
    seeds: Optional[Sequence[int]] = None,
) -> RunResult:
    """
    Run every (seed, setting, model) cell of an experiment.

    Args:
        config: validated experiment
        out_dir: where report.csv, summary.csv, summary.txt and
            run_metadata.txt go; nothing is written when None
        jobs: seeds evaluated in parallel (default from settings)
        no_clamp: disable propensity clamping for every IPTW/AIPTW model
        seeds: restrict the run to these seeds

    Returns:
        RunResult with rows in seed order regardless of completion order
    """
    seeds = list(config.seeds if seeds is None else seeds)
    jobs = max(1, jobs or get_settings().jobs)
    logger.info("Running experiment '%s': %d seeds x %d settings x %d models (jobs=%d)",
                config.name, len(seeds), len(config.settings), len(config.models), jobs)
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(run_seed, config, seed, no_clamp) for seed in seeds]
        rows = [row for future in futures for row in future.result()]

    report = rows_to_frame(rows)
    summary = summarize_frame(report)
    result = RunResult(rows, report, summary)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.paths = _write_reports(report, summary, out_dir)
        echo = config.echo()
        echo["run.no_clamp"] = str(no_clamp).lower()
        metadata = out_dir / "run_metadata.txt"
        metadata.write_text("".join(f"{key} = {value}\n" for key, value in echo.items()))
        result.paths["metadata"] = metadata
    logger.info("Experiment '%s' finished: %d rows, %d failed", config.name, len(rows), result.failed)
    return result


def read_report(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"report {path} does not exist")
    frame = pd.read_csv(path, dtype={"model": str, "setting": str, "status": str}, keep_default_na=False,
                        na_values={c: [""] for c in METRIC_COLUMNS})
    return frame


def summarize(report_paths: Sequence, out_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Aggregate one or more report.csv files; all must share the same columns"""
    if not report_paths:
        raise ReportError("summarize needs at least one report")
    frames = [read_report(path) for path in report_paths]
    columns = list(frames[0].columns)
    for path, frame in zip(report_paths, frames):
        if list(frame.columns) != columns:
            raise ReportError(f"{path} columns {list(frame.columns)} differ from {columns}")
    missing = [c for c in ("model", "setting", "status") if c not in columns]
    if missing:
        raise ReportError(f"reports lack columns {missing}")
    report = pd.concat(frames, ignore_index=True)
    summary = summarize_frame(report.reindex(columns=REPORT_COLUMNS))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out_dir / "summary.csv", index=False, float_format=REPORT_FLOAT_FORMAT)
        (out_dir / "summary.txt").write_text(format_summary(summary))
    return summary


# Single-step operations behind the gen / train / estimate / score subcommands


def generate_to_directory(config: ExperimentConfig, seed: int, out_dir, setting: Optional[str] = None) -> Path:
    setting = setting or next(iter(config.settings))
    generated = generate(config, setting, seed)
    if generated.dataset is None:
        raise ConfigError("population-covariance linear-sem settings produce no dataset; set n > 0")
    return save_dataset(generated.dataset, out_dir)


def train_to_directory(
    config: ExperimentConfig, seed: int, out_dir, setting: Optional[str] = None, dataset: Optional[Dataset] = None
) -> Dict[str, Path]:
    """
    Train every dgse/dmse/dmse_v model of the config on the train split and
    write <label>.npz checkpoints, <label>_trace.csv and the split datasets.
    """
    setting = setting or next(iter(config.settings))
    if dataset is None:
        dataset = generate(config, setting, seed).dataset
    if dataset is None:
        raise ConfigError("training needs a dataset")
    root = setting_stream(seed, setting)
    parts = split_dataset(dataset, config.splits, root.child(1))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, part in parts.items():
        paths[f"data_{name}"] = save_dataset(part, out_dir / "data" / name)

    deep = [spec for spec in config.models if spec.kind in DEEP_KINDS]
    if not deep:
        raise ConfigError("config has no dgse, dmse or dmse_v model to train")
    for spec in deep:
        rng = root.child(2).child(_key(spec.label))
        train = _restrict(parts["train"], spec)
        if spec.kind == "dgse":
            if len(train.modalities) > 1:
                train = zero_impute_modalities(train)
            model = build_dgse(train, spec.model, rng.child(0))
            trace = train_dgse(model, train, spec.training, rng.child(1))
        else:
            causal = train.treatment.ndim == 1
            model = build_dmse(train, spec.model, rng.child(0), use_confounder=spec.kind == "dmse_v",
                               causal_heads=causal)
            trace = train_dmse(model, train, spec.training, rng.child(1))
        paths[spec.label] = model.save(out_dir / f"{spec.label}.npz", {"label": spec.label, "seed": seed})
        paths[f"{spec.label}_trace"] = trace.save_csv(out_dir / f"{spec.label}_trace.csv")
    return paths


def load_model(path) -> Union[DgseModel, DmseModel]:
    _, meta = load_checkpoint(path)
    kind = meta.get("model")
    if kind == "dgse":
        return DgseModel.from_checkpoint(path)
    if kind == "dmse":
        return DmseModel.from_checkpoint(path)
    raise StateError(f"checkpoint {path} holds an unknown model '{kind}'")


def estimate(model: Union[DgseModel, DmseModel], dataset: Dataset, n_samples: int, seed: int) -> pd.DataFrame:
    """
    Per-row ITE (columns row, ite, stderr[, subset_used]) for causal models;
    per-SNP effects (columns snp, gamma) for a latent-only DMSE.
    """
    rng = RngStream(seed)
    if isinstance(model, DgseModel):
        data = zero_impute_modalities(dataset) if len(dataset.modalities) > 1 else dataset
        prediction = dgse_ite_batch(model, single_modality(data), n_samples, rng)
        return pd.DataFrame({"row": np.arange(dataset.n_rows), "ite": prediction.ite, "stderr": prediction.stderr})
    model.check_dataset(dataset)
    if not model.causal_heads:
        gamma = baselines.per_snp_effect(dataset.outcome, dataset.treatment, dmse_latents(model, dataset))
        return pd.DataFrame({"snp": np.arange(gamma.size), "gamma": gamma})
    prediction = dmse_ite_batch(model, make_batch(dataset), model.modality_names, n_samples, rng)
    return pd.DataFrame({
        "row": np.arange(dataset.n_rows),
        "ite": prediction.ite,
        "stderr": prediction.stderr,
        "subset_used": prediction.subset_used,
    })


def score_estimates(estimates: pd.DataFrame, dataset: Dataset) -> Dict[str, float]:
    """Score an estimate file against the dataset's recorded truth"""
    if "gamma" in estimates:
        return score_gwas(estimates["gamma"].to_numpy(dtype=float), dataset)
    if "ite" not in estimates:
        raise ReportError("estimates need an 'ite' or a 'gamma' column")
    ite = estimates["ite"].to_numpy(dtype=float)
    scores = {"ate": float(ite.mean())}
    truth = _true_ate(dataset)
    if truth is not None:
        scores["ate_err"] = ate_error(scores["ate"], truth)
    if dataset.truth is not None and dataset.truth.true_ite is not None:
        if len(ite) != dataset.n_rows:
            raise ReportError("estimate rows do not match the dataset")
        scores["ite_rmse"] = float(np.sqrt(np.mean((ite - dataset.truth.true_ite) ** 2)))
    return scores
