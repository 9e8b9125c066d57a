"""
Deep multi-modal structural equations: product-of-experts posterior and sub-sampled ELBO
"""
import itertools
import logging
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.services.datagen import Dataset
from src.services.dgse_service import ItePrediction, network_stream
from src.services.diffnet import MlpFunction, NetworkOptimizer, load_checkpoint, save_checkpoint
from src.services.heads import (
    decoder_loglik,
    head_layout,
    outcome_layout,
    outcome_loglik,
    outcome_mean,
    scale_upstream,
    treatment_loglik,
)
from src.services.trainer import ModelConfig, TrainingConfig, TrainingTrace, run_epochs
from src.utils.config import get_settings
from src.utils.errors import DimensionError, DomainError, MissingModalityError, StateError
from src.utils.gaussian import DiagGaussian, poe_fuse, reparam_sample
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

TY_EXPERT = "expert_ty"
ITE_CHUNK = 20000


@dataclass
class Batch:
    """Rows handed to the model; masked modality rows are zero-filled"""

    modalities: Dict[str, np.ndarray]
    available: Dict[str, np.ndarray]
    t: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.available.values()))) if self.available else len(self.t)


def make_batch(dataset: Dataset, rows=None) -> Batch:
    rows = np.arange(dataset.n_rows) if rows is None else np.asarray(rows)
    modalities, available = {}, {}
    for name in dataset.modality_names:
        avail = ~dataset.missing_mask[name][rows]
        matrix = dataset.modalities[name][rows].astype(float)
        matrix[~avail] = 0.0
        modalities[name], available[name] = matrix, avail
    t = dataset.treatment[rows].astype(float) if dataset.treatment.ndim == 1 else None
    v = None if dataset.observed_confounder is None else dataset.observed_confounder[rows].astype(float)
    return Batch(modalities, available, t, dataset.outcome[rows].astype(float), v)


class DmseModel:
    """
    Per-modality decoders p(x_j|z) and experts q̃(z|x_j); treatment head
    p(t|z[,v]), outcome head p(y|z,t[,v]) and joint expert q̃(z|y,t[,v]).

    With causal_heads=False only the modality decoders and experts exist
    (used to extract confounder latents for GWAS adjustment).
    """

    def __init__(
        self,
        modality_dims: Dict[str, int],
        modality_kinds: Dict[str, str],
        outcome_kind: str = "bernoulli",
        config: Optional[ModelConfig] = None,
        confounder_dim: int = 0,
        causal_heads: bool = True,
        rng: Optional[RngStream] = None,
    ):
        if not modality_dims:
            raise DimensionError("a DMSE model needs at least one modality")
        self.config = config or ModelConfig()
        self.modality_dims = {k: int(v) for k, v in modality_dims.items()}
        self.modality_kinds = {k: modality_kinds[k] for k in self.modality_dims}
        self.outcome_kind = outcome_kind
        self.confounder_dim = int(confounder_dim)
        self.causal_heads = causal_heads
        rng = rng or RngStream(0)
        p, hidden, dv = self.config.latent_dim, self.config.hidden, self.confounder_dim

        layout = {}
        for name, dim in self.modality_dims.items():
            layout[f"decoder_{name}"] = (p, head_layout(self.modality_kinds[name], dim))
            layout[f"expert_{name}"] = (dim, {"mean": p, "log_variance": p})
        if causal_heads:
            layout["t_head"] = (p + dv, {"logit": 1})
            layout["y_head"] = (p + 1 + dv, outcome_layout(outcome_kind))
            layout[TY_EXPERT] = (2 + dv, {"mean": p, "log_variance": p})
        self.networks: Dict[str, MlpFunction] = {
            name: MlpFunction(n_in, hidden, heads, rng=network_stream(rng, name))
            for name, (n_in, heads) in layout.items()
        }

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def modality_names(self) -> List[str]:
        return list(self.modality_dims)

    def ordered(self, subset: Sequence[str]) -> List[str]:
        """Subset in declaration order; unknown names raise"""
        unknown = [name for name in subset if name not in self.modality_dims]
        if unknown:
            raise MissingModalityError(f"model has no modality {unknown}")
        return [name for name in self.modality_names if name in set(subset)]

    def check_dataset(self, dataset: Dataset) -> None:
        for name, dim in self.modality_dims.items():
            if name not in dataset.modalities:
                raise MissingModalityError(f"dataset lacks modality '{name}'")
            if dataset.modality_dim(name) != dim:
                raise DimensionError(f"modality '{name}' has width {dataset.modality_dim(name)}, model expects {dim}")
        if self.confounder_dim:
            v = dataset.observed_confounder
            if v is None or v.shape[1] != self.confounder_dim:
                raise DimensionError(f"model expects an observed confounder of width {self.confounder_dim}")

    def save(self, path, metadata: Optional[dict] = None):
        meta = {
            "model": "dmse",
            "modality_dims": self.modality_dims,
            "modality_kinds": self.modality_kinds,
            "outcome_kind": self.outcome_kind,
            "confounder_dim": self.confounder_dim,
            "causal_heads": self.causal_heads,
            "config": self.config.model_dump(),
            **(metadata or {}),
        }
        return save_checkpoint(path, self.networks, meta)

    @classmethod
    def from_checkpoint(cls, path) -> "DmseModel":
        networks, meta = load_checkpoint(path)
        if meta.get("model") != "dmse":
            raise StateError(f"checkpoint holds a '{meta.get('model')}' model, not dmse")
        model = cls(
            meta["modality_dims"], meta["modality_kinds"], meta["outcome_kind"],
            ModelConfig(**meta["config"]), meta["confounder_dim"], meta["causal_heads"],
        )
        model.networks = networks
        return model


def build_dmse(
    dataset: Dataset,
    config: Optional[ModelConfig],
    rng: RngStream,
    use_confounder: bool = False,
    causal_heads: bool = True,
) -> DmseModel:
    """DMSE (or DMSE-V when use_confounder) shaped after a dataset"""
    confounder_dim = 0
    if use_confounder:
        if dataset.observed_confounder is None:
            raise DimensionError("DMSE-V needs a dataset with an observed confounder")
        confounder_dim = dataset.observed_confounder.shape[1]
    return DmseModel(
        {name: dataset.modality_dim(name) for name in dataset.modality_names},
        dataset.modality_kinds,
        dataset.outcome_kind,
        config,
        confounder_dim,
        causal_heads,
        rng,
    )


@dataclass
class _Expert:
    name: str
    mean: np.ndarray
    raw_variance: np.ndarray
    precision: np.ndarray
    trace: object


@dataclass
class _Fusion:
    experts: List[_Expert]
    posterior: DiagGaussian
    total_precision: np.ndarray


def _with_confounder(model: DmseModel, batch: Batch, *columns) -> np.ndarray:
    parts = [c if c.ndim == 2 else c[:, None] for c in columns]
    if model.confounder_dim:
        if batch.v is None:
            raise DimensionError("DMSE-V model called without observed confounder values")
        parts.append(batch.v)
    return np.hstack(parts)


def _fuse(model: DmseModel, batch: Batch, subset: List[str], include_ty: bool) -> _Fusion:
    """Prior N(0, I) times available experts; masked rows get zero precision"""
    floor = get_settings().variance_floor
    n, p = batch.n_rows, model.latent_dim
    experts: List[_Expert] = []
    for name in subset:
        out, trace = model.networks[f"expert_{name}"].forward_traced(batch.modalities[name])
        raw = np.exp(out["log_variance"])
        avail = batch.available[name][:, None]
        precision = np.where(avail, 1.0 / np.maximum(raw, floor), 0.0)
        experts.append(_Expert(name, out["mean"], raw, precision, trace))
    if include_ty:
        if not model.causal_heads:
            raise StateError("model has no joint (t, y) expert")
        out, trace = model.networks[TY_EXPERT].forward_traced(_with_confounder(model, batch, batch.t, batch.y))
        raw = np.exp(out["log_variance"])
        experts.append(_Expert(TY_EXPERT, out["mean"], raw, 1.0 / np.maximum(raw, floor), trace))

    factors = [
        DiagGaussian(
            e.mean,
            np.divide(1.0, e.precision, out=np.full_like(e.precision, np.inf), where=e.precision > 0),
        )
        for e in experts
    ]
    posterior = poe_fuse(factors, DiagGaussian.standard(p, (n,)), floor)
    total = 1.0 + sum(e.precision for e in experts) if experts else np.ones((n, p))
    return _Fusion(experts, posterior, total)


def _backward_fusion(model: DmseModel, fusion: _Fusion, d_mean: np.ndarray, d_var: np.ndarray) -> None:
    """Push gradients w.r.t. the fused mean and variance into every contributing expert"""
    floor = get_settings().variance_floor
    total = fusion.total_precision
    mu = fusion.posterior.mean
    active = (1.0 / total) > floor
    g_n = d_mean / total
    g_s = -d_mean * mu / total - d_var * active / total ** 2
    for expert in fusion.experts:
        d_mu_k = g_n * expert.precision
        d_prec = g_n * expert.mean + g_s
        d_logvar = -expert.precision * d_prec * (expert.raw_variance > floor)
        net = model.networks[TY_EXPERT if expert.name == TY_EXPERT else f"expert_{expert.name}"]
        net.backward({"mean": d_mu_k, "log_variance": d_logvar}, expert.trace)


def posterior(
    model: DmseModel, batch: Batch, subset: Sequence[str], include_ty: bool, strict: bool = True
) -> DiagGaussian:
    """
    q(z | x_subset[, y, t]) ∝ p(z) Π q̃(z|x_j) [q̃(z|y,t)] per row.

    With strict=True any requested modality masked in any row raises;
    otherwise masked experts drop out row by row.
    """
    names = model.ordered(subset)
    if strict:
        for name in names:
            if not batch.available[name].all():
                raise MissingModalityError(f"modality '{name}' is masked in some rows")
    return _fuse(model, batch, names, include_ty).posterior


def subset_key(names: Sequence[str]) -> int:
    return zlib.crc32(",".join(names).encode("utf-8"))


@dataclass
class SubsetElbo:
    value: float
    kl: float
    n_rows: int
    subset: Tuple[str, ...] = ()


def elbo_subset(
    model: DmseModel, batch: Batch, subset: Sequence[str], rng: RngStream, accumulate: bool = True
) -> SubsetElbo:
    """
    ELBO_M for one modality subset: reconstruction of x_M, t and y from a
    single reparameterized sample of the fused posterior, minus β·KL to the
    prior in closed form.

    Masked modalities drop out row by row; rows with none of M available
    contribute nothing. The noise comes from rng.child(key of the effective
    subset), so identical subsets share noise.
    """
    if not subset:
        raise DomainError("elbo_subset needs a nonempty modality subset")
    names = [name for name in model.ordered(subset) if batch.available[name].any()]
    if not names:
        return SubsetElbo(0.0, 0.0, 0, ())
    n, p = batch.n_rows, model.latent_dim
    beta = model.config.beta
    nets = model.networks

    row_w = np.any(np.stack([batch.available[name] for name in names]), axis=0).astype(float)
    fusion = _fuse(model, batch, names, include_ty=model.causal_heads)
    mu, variance = fusion.posterior.mean, fusion.posterior.variance
    eps = rng.child(subset_key(names)).normal((n, p))
    std = np.sqrt(variance)
    z = mu + std * eps
    kl_rows = 0.5 * np.sum(variance + mu ** 2 - 1.0 - np.log(variance), axis=1)

    recon = np.zeros(n)
    pending = []
    for name in names:
        weight = row_w * batch.available[name]
        out, trace = nets[f"decoder_{name}"].forward_traced(z)
        ll, upstream = decoder_loglik(model.modality_kinds[name], batch.modalities[name], out)
        recon += weight * ll
        pending.append((nets[f"decoder_{name}"], scale_upstream(upstream, weight), trace))
    if model.causal_heads:
        t_out, t_trace = nets["t_head"].forward_traced(_with_confounder(model, batch, z))
        ll_t, d_t = treatment_loglik(batch.t, t_out)
        y_out, y_trace = nets["y_head"].forward_traced(_with_confounder(model, batch, z, batch.t))
        ll_y, up_y = outcome_loglik(model.outcome_kind, batch.y, y_out, model.config.outcome_variance)
        recon += row_w * (ll_t + ll_y)
        pending.append((nets["t_head"], {"logit": d_t * row_w[:, None]}, t_trace))
        pending.append((nets["y_head"], scale_upstream(up_y, row_w), y_trace))

    if accumulate:
        dz = np.zeros((n, p))
        for net, upstream, trace in pending:
            dz += net.backward(upstream, trace)[:, :p]
        w = row_w[:, None]
        d_mean = dz - beta * w * mu
        d_var = dz * eps / (2.0 * std) - beta * w * 0.5 * (1.0 - 1.0 / variance)
        _backward_fusion(model, fusion, d_mean, d_var)

    value = float(np.sum(recon - beta * row_w * kl_rows))
    return SubsetElbo(value, float(np.sum(row_w * kl_rows)), int(row_w.sum()), tuple(names))


def candidate_subsets(names: Sequence[str]) -> List[Tuple[str, ...]]:
    """Nonempty subsets other than singletons and the full set"""
    return [
        combo
        for size in range(2, len(names))
        for combo in itertools.combinations(names, size)
    ]


@dataclass
class SubsampledElbo:
    value: float
    terms: List[SubsetElbo] = field(default_factory=list)


def default_subset_count(model: DmseModel) -> int:
    if model.config.subsets is not None:
        return model.config.subsets
    return min(len(model.modality_dims), 4)


def elbo_subsampled(
    model: DmseModel, batch: Batch, s: int, rng: RngStream, accumulate: bool = True
) -> SubsampledElbo:
    """
    ELBO over all modalities + each singleton + s subsets drawn uniformly from the rest

    The fixed terms draw noise from `rng`; the j-th random pick draws from
    rng.child(1).child(j), so a subset picked twice gets fresh noise each time.
    """
    if s < 0:
        raise DomainError("s must be non-negative")
    names = model.modality_names
    draws: List[Tuple[Tuple[str, ...], RngStream]] = [(tuple(names), rng)] + [((name,), rng) for name in names]
    pool = candidate_subsets(names)
    if s and pool:
        picks = rng.child(0).integers(0, len(pool), size=s)
        draws.extend((pool[i], rng.child(1).child(j)) for j, i in enumerate(picks))
    terms = [elbo_subset(model, batch, subset, stream, accumulate) for subset, stream in draws]
    return SubsampledElbo(sum(term.value for term in terms), terms)


def train_dmse(
    model: DmseModel, dataset: Dataset, config: TrainingConfig, rng: RngStream, s: Optional[int] = None
) -> TrainingTrace:
    """Adam descent on −ELBO_sub/batch; masked modality rows never reach their experts or decoders"""
    model.check_dataset(dataset)
    s = default_subset_count(model) if s is None else s
    optimizer = NetworkOptimizer(model.networks, config.adam())
    batch_all = make_batch(dataset)

    def step(rows: np.ndarray, batch_rng: RngStream):
        batch = Batch(
            {k: v[rows] for k, v in batch_all.modalities.items()},
            {k: v[rows] for k, v in batch_all.available.items()},
            None if batch_all.t is None else batch_all.t[rows],
            batch_all.y[rows],
            None if batch_all.v is None else batch_all.v[rows],
        )
        optimizer.zero_grad()
        result = elbo_subsampled(model, batch, s, batch_rng)
        return result.value, 0.0

    logger.info(
        "Training DMSE on %d rows: modalities %s, s=%d, beta=%.3g",
        dataset.n_rows, model.modality_names, s, model.config.beta,
    )
    return run_epochs(step, dataset.n_rows, config, rng, label="dmse", optimizer=optimizer)


@dataclass
class DmseItePrediction(ItePrediction):
    subset_used: List[str] = field(default_factory=list)


def _subset_labels(model: DmseModel, batch: Batch, names: List[str]) -> List[str]:
    labels = []
    for row in range(batch.n_rows):
        used = [name for name in names if batch.available[name][row]]
        labels.append("+".join(used) if used else "prior")
    return labels


def dmse_ite_batch(
    model: DmseModel,
    batch: Batch,
    subset: Sequence[str],
    n_samples: int,
    rng: RngStream,
    row_ids=None,
) -> DmseItePrediction:
    """
    ITE per row: sample z from q(z | x_subset) (no t, y) and average
    E[y|z,t=1] − E[y|z,t=0].

    Rows missing requested modalities fall back to the available part of the
    subset; the subset actually used is reported per row.
    """
    if not model.causal_heads:
        raise StateError("model was built without treatment and outcome heads")
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    names = model.ordered(subset)
    fused = _fuse(model, batch, names, include_ty=False).posterior
    n, p = batch.n_rows, model.latent_dim
    row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
    ite, stderr = np.empty(n), np.zeros(n)
    chunk = max(1, ITE_CHUNK // n_samples)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        eps = np.stack([rng.child(int(row_ids[r])).normal((n_samples, p)) for r in rows])
        z = fused.mean[rows][:, None, :] + np.sqrt(fused.variance[rows])[:, None, :] * eps
        z = z.reshape(-1, p)
        v_rep = None if batch.v is None else np.repeat(batch.v[rows], n_samples, axis=0)
        reps = Batch({}, {}, None, None, v_rep)
        ones = np.ones(len(z))
        treated = outcome_mean(model.outcome_kind, model.networks["y_head"].forward_traced(
            _with_confounder(model, reps, z, ones))[0])
        control = outcome_mean(model.outcome_kind, model.networks["y_head"].forward_traced(
            _with_confounder(model, reps, z, 0.0 * ones))[0])
        draws = (treated - control).reshape(len(rows), n_samples)
        ite[rows] = draws.mean(axis=1)
        if n_samples > 1:
            stderr[rows] = draws.std(axis=1, ddof=1) / np.sqrt(n_samples)
    return DmseItePrediction(ite, stderr, _subset_labels(model, batch, names))


def dmse_ite(model: DmseModel, row: Batch, subset: Sequence[str], n_samples: int, rng: RngStream) -> float:
    """Single-row ITE; noise from rng.child(0)"""
    if row.n_rows != 1:
        raise DimensionError("dmse_ite takes a one-row batch; use dmse_ite_batch for more")
    return float(dmse_ite_batch(model, row, subset, n_samples, rng).ite[0])


def dmse_ate(
    model: DmseModel, dataset: Dataset, n_samples: int, rng: RngStream, subset: Optional[Sequence[str]] = None
) -> float:
    subset = model.modality_names if subset is None else subset
    return float(np.mean(dmse_ite_batch(model, make_batch(dataset), subset, n_samples, rng).ite))


def dmse_latents(
    model: DmseModel,
    dataset: Dataset,
    subset: Optional[Sequence[str]] = None,
    per_modality: bool = False,
    sample: bool = False,
    rng: Optional[RngStream] = None,
) -> np.ndarray:
    """
    Latent confounders inferred from the proxies alone.

    Returns posterior means, or with sample=True one reparameterized draw per
    row from rng.child(key of the fused subset). per_modality=True fuses each
    modality with the prior separately and concatenates the results
    column-wise.
    """
    if sample and rng is None:
        raise StateError("sampled latents need a random stream")
    batch = make_batch(dataset)
    names = model.ordered(model.modality_names if subset is None else subset)
    groups = [[name] for name in names] if per_modality else [names]
    blocks = []
    for group in groups:
        fused = _fuse(model, batch, group, False).posterior
        blocks.append(reparam_sample(fused, rng.child(subset_key(group))) if sample else fused.mean)
    return np.hstack(blocks)


def collapse_proxies(dataset: Dataset, groups: Sequence[Sequence[str]]) -> Dataset:
    """Concatenate each group of modalities into one named 'a+b'; masks are OR-combined"""
    seen = set()
    for group in groups:
        for name in group:
            if name in seen:
                raise DomainError(f"modality '{name}' appears in more than one group")
            if name not in dataset.modalities:
                raise MissingModalityError(f"unknown modality '{name}'")
            seen.add(name)

    modalities, kinds, masks = {}, {}, {}
    grouped = {name: group for group in groups for name in group}
    for name in dataset.modality_names:
        if name not in grouped:
            modalities[name] = dataset.modalities[name]
            kinds[name] = dataset.modality_kinds[name]
            masks[name] = dataset.missing_mask[name].copy()
            continue
        group = list(grouped[name])
        if name != group[0]:
            continue
        member_kinds = {dataset.modality_kinds[m] for m in group}
        if len(member_kinds) != 1:
            raise DomainError(f"group {group} mixes likelihoods {sorted(member_kinds)}")
        label = "+".join(group)
        modalities[label] = np.hstack([dataset.modalities[m] for m in group])
        kinds[label] = member_kinds.pop()
        masks[label] = np.any(np.stack([dataset.missing_mask[m] for m in group]), axis=0)

    return Dataset(
        modalities=modalities,
        treatment=dataset.treatment,
        outcome=dataset.outcome,
        modality_kinds=kinds,
        outcome_kind=dataset.outcome_kind,
        treatment_kind=dataset.treatment_kind,
        observed_confounder=dataset.observed_confounder,
        truth=dataset.truth,
        missing_mask=masks,
        metadata=dict(dataset.metadata),
    )
