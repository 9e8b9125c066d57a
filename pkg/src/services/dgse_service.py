"""
Uni-modal deep Gaussian structural equations with auxiliary encoders
"""
import logging
import zlib
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from src.services.datagen import Dataset
from src.services.diffnet import MlpFunction, NetworkOptimizer, load_checkpoint, save_checkpoint
from src.services.heads import (
    decoder_loglik,
    head_layout,
    outcome_layout,
    outcome_loglik,
    outcome_mean,
    treatment_loglik,
)
from src.services.trainer import ModelConfig, TrainingConfig, TrainingTrace, run_epochs
from src.utils.config import get_settings
from src.utils.errors import DimensionError, DomainError, StateError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)

ITE_CHUNK = 20000


def network_stream(rng: RngStream, name: str) -> RngStream:
    """Initialization stream keyed by network name, independent of construction order"""
    return rng.child(zlib.crc32(name.encode("utf-8")))


@dataclass
class ElboResult:
    """Batch sums of the objective pieces"""

    elbo: float
    aux: float
    kl: float
    n_rows: int

    @property
    def value(self) -> float:
        return self.elbo + self.aux


@dataclass
class ItePrediction:
    ite: np.ndarray
    stderr: np.ndarray


class DgseModel:
    """
    p(z) p(x|z) p(t|z) p(y|z,t) with posterior encoder q(z|x,t,y) and
    auxiliary encoders q(t|x), q(y|t,x).
    """

    def __init__(
        self,
        x_dim: int,
        x_kind: str = "bernoulli",
        outcome_kind: str = "bernoulli",
        config: Optional[ModelConfig] = None,
        rng: Optional[RngStream] = None,
    ):
        self.config = config or ModelConfig()
        self.x_dim = int(x_dim)
        self.x_kind = x_kind
        self.outcome_kind = outcome_kind
        rng = rng or RngStream(0)
        p, hidden = self.config.latent_dim, self.config.hidden
        y_heads = outcome_layout(outcome_kind)
        layout = {
            "x_decoder": (p, head_layout(x_kind, self.x_dim)),
            "t_head": (p, {"logit": 1}),
            "y_head": (p + 1, y_heads),
            "encoder": (self.x_dim + 2, {"mean": p, "log_variance": p}),
            "aux_t": (self.x_dim, {"logit": 1}),
            "aux_y": (self.x_dim + 1, y_heads),
        }
        self.networks: Dict[str, MlpFunction] = {
            name: MlpFunction(n_in, hidden, heads, rng=network_stream(rng, name))
            for name, (n_in, heads) in layout.items()
        }

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def outcome_variance(self) -> float:
        return self.config.outcome_variance

    def save(self, path, metadata: Optional[dict] = None):
        meta = {
            "model": "dgse",
            "x_dim": self.x_dim,
            "x_kind": self.x_kind,
            "outcome_kind": self.outcome_kind,
            "config": self.config.model_dump(),
            **(metadata or {}),
        }
        return save_checkpoint(path, self.networks, meta)

    @classmethod
    def from_checkpoint(cls, path) -> "DgseModel":
        networks, meta = load_checkpoint(path)
        if meta.get("model") != "dgse":
            raise StateError(f"checkpoint holds a '{meta.get('model')}' model, not dgse")
        model = cls(meta["x_dim"], meta["x_kind"], meta["outcome_kind"], ModelConfig(**meta["config"]))
        model.networks = networks
        return model


def dgse_elbo(
    model: DgseModel, x: np.ndarray, t: np.ndarray, y: np.ndarray, rng: RngStream, accumulate: bool = True
) -> ElboResult:
    """
    Monte-Carlo ELBO plus the auxiliary term over a batch.

    One reparameterized z per row. With accumulate=True the gradient of the
    summed objective (ascent direction) is added to every network's buffers.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise DimensionError("dgse_elbo needs a nonempty batch")
    if x.shape[1] != model.x_dim:
        raise DimensionError(f"x has {x.shape[1]} features, model expects {model.x_dim}")
    floor = get_settings().variance_floor
    nets = model.networks
    p = model.latent_dim

    enc, enc_trace = nets["encoder"].forward_traced(np.column_stack([x, t, y]))
    raw = np.exp(enc["log_variance"])
    variance = np.maximum(raw, floor)
    eps = rng.normal((n, p))
    std = np.sqrt(variance)
    z = enc["mean"] + std * eps
    kl_rows = 0.5 * np.sum(variance + enc["mean"] ** 2 - 1.0 - np.log(variance), axis=1)

    x_out, x_trace = nets["x_decoder"].forward_traced(z)
    ll_x, up_x = decoder_loglik(model.x_kind, x, x_out)
    t_out, t_trace = nets["t_head"].forward_traced(z)
    ll_t, d_t = treatment_loglik(t, t_out)
    y_out, y_trace = nets["y_head"].forward_traced(np.column_stack([z, t]))
    ll_y, up_y = outcome_loglik(model.outcome_kind, y, y_out, model.outcome_variance)
    elbo_rows = ll_x + ll_t + ll_y - kl_rows

    at_out, at_trace = nets["aux_t"].forward_traced(x)
    ll_at, d_at = treatment_loglik(t, at_out)
    ay_out, ay_trace = nets["aux_y"].forward_traced(np.column_stack([x, t]))
    ll_ay, up_ay = outcome_loglik(model.outcome_kind, y, ay_out, model.outcome_variance)
    aux_rows = ll_at + ll_ay

    if accumulate:
        dz = nets["x_decoder"].backward(up_x, x_trace)
        dz = dz + nets["t_head"].backward({"logit": d_t}, t_trace)
        dz = dz + nets["y_head"].backward(up_y, y_trace)[:, :p]
        d_mean = dz - enc["mean"]
        d_var = dz * eps / (2.0 * std) - 0.5 * (1.0 - 1.0 / variance)
        d_logvar = d_var * raw * (raw > floor)
        nets["encoder"].backward({"mean": d_mean, "log_variance": d_logvar}, enc_trace)
        nets["aux_t"].backward({"logit": d_at}, at_trace)
        nets["aux_y"].backward(up_ay, ay_trace)

    return ElboResult(
        elbo=float(np.sum(elbo_rows)), aux=float(np.sum(aux_rows)), kl=float(np.sum(kl_rows)), n_rows=n
    )


def single_modality(dataset: Dataset) -> np.ndarray:
    if len(dataset.modalities) != 1:
        raise DimensionError(
            f"DGSE takes exactly one modality, dataset has {dataset.modality_names}; "
            "use zero_impute_modalities() to merge them"
        )
    name = dataset.modality_names[0]
    matrix = dataset.modalities[name].copy()
    matrix[dataset.missing_mask[name]] = 0.0
    return matrix


def zero_impute_modalities(dataset: Dataset, name: str = "proxies") -> Dataset:
    """Concatenate every modality into one, writing zeros for masked rows"""
    kinds = {dataset.modality_kinds[k] for k in dataset.modality_names}
    if len(kinds) != 1:
        raise DimensionError(f"cannot merge modalities of different likelihoods {sorted(kinds)}")
    blocks = []
    for key in dataset.modality_names:
        block = dataset.modalities[key].copy()
        block[dataset.missing_mask[key]] = 0.0
        blocks.append(block)
    merged = Dataset(
        modalities={name: np.hstack(blocks)},
        treatment=dataset.treatment,
        outcome=dataset.outcome,
        modality_kinds={name: kinds.pop()},
        outcome_kind=dataset.outcome_kind,
        treatment_kind=dataset.treatment_kind,
        observed_confounder=dataset.observed_confounder,
        truth=dataset.truth,
        metadata=dict(dataset.metadata),
    )
    return merged


def build_dgse(dataset: Dataset, config: Optional[ModelConfig], rng: RngStream) -> DgseModel:
    name = dataset.modality_names[0]
    return DgseModel(
        dataset.modality_dim(name), dataset.modality_kinds[name], dataset.outcome_kind, config, rng
    )


def train_dgse(model: DgseModel, dataset: Dataset, config: TrainingConfig, rng: RngStream) -> TrainingTrace:
    """Adam descent on −(ELBO + L′)/batch over shuffled minibatches"""
    x = single_modality(dataset)
    t, y = dataset.treatment.astype(float), dataset.outcome.astype(float)
    optimizer = NetworkOptimizer(model.networks, config.adam())

    def step(rows: np.ndarray, batch_rng: RngStream):
        optimizer.zero_grad()
        result = dgse_elbo(model, x[rows], t[rows], y[rows], batch_rng)
        return result.elbo, result.aux

    logger.info("Training DGSE on %d rows (latent dim %d)", dataset.n_rows, model.latent_dim)
    return run_epochs(step, dataset.n_rows, config, rng, label="dgse", optimizer=optimizer)


def _row_noise(rng: RngStream, row_ids, n_samples: int, p: int):
    """Per-row derived streams: (u_t, u_y, eps_y, eps_z) for each row"""
    u_t, u_y, eps_y, eps_z = [], [], [], []
    for row in row_ids:
        stream = rng.child(int(row))
        u_t.append(stream.uniform(n_samples))
        u_y.append(stream.uniform(n_samples))
        eps_y.append(stream.normal(n_samples))
        eps_z.append(stream.normal((n_samples, p)))
    return np.concatenate(u_t), np.concatenate(u_y), np.concatenate(eps_y), np.concatenate(eps_z)


def _ite_chunk(model: DgseModel, x: np.ndarray, noise, n_samples: int) -> np.ndarray:
    nets = model.networks
    floor = get_settings().variance_floor
    u_t, u_y, eps_y, eps_z = noise
    xs = np.repeat(x, n_samples, axis=0)

    p_t = expit(nets["aux_t"].forward_traced(xs)[0]["logit"][:, 0])
    t = (u_t < p_t).astype(float)
    y_out = nets["aux_y"].forward_traced(np.column_stack([xs, t]))[0]
    if model.outcome_kind == "gaussian":
        y = y_out["mean"][:, 0] + np.sqrt(model.outcome_variance) * eps_y
    else:
        y = (u_y < expit(y_out["logit"][:, 0])).astype(float)

    enc = nets["encoder"].forward_traced(np.column_stack([xs, t, y]))[0]
    z = enc["mean"] + np.sqrt(np.maximum(np.exp(enc["log_variance"]), floor)) * eps_z
    ones = np.ones(len(z))
    treated = outcome_mean(model.outcome_kind, nets["y_head"].forward_traced(np.column_stack([z, ones]))[0])
    control = outcome_mean(model.outcome_kind, nets["y_head"].forward_traced(np.column_stack([z, 0 * ones]))[0])
    return (treated - control).reshape(x.shape[0], n_samples)


def dgse_ite_batch(
    model: DgseModel, x: np.ndarray, n_samples: int, rng: RngStream, row_ids=None
) -> ItePrediction:
    """
    ITE per row via t ~ q(t|x), y ~ q(y|t,x), z ~ q(z|x,t,y), averaging
    E[y|z,t′=1] − E[y|z,t′=0] over n_samples draws.

    Row i draws its noise from rng.child(row_ids[i]), so results do not
    depend on row order or chunking.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    x = np.asarray(x, dtype=float)
    row_ids = np.arange(x.shape[0]) if row_ids is None else np.asarray(row_ids)
    chunk = max(1, ITE_CHUNK // n_samples)
    ite, stderr = np.empty(x.shape[0]), np.zeros(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        sl = slice(start, start + chunk)
        noise = _row_noise(rng, row_ids[sl], n_samples, model.latent_dim)
        draws = _ite_chunk(model, x[sl], noise, n_samples)
        ite[sl] = draws.mean(axis=1)
        if n_samples > 1:
            stderr[sl] = draws.std(axis=1, ddof=1) / np.sqrt(n_samples)
    return ItePrediction(ite, stderr)


def dgse_ite(model: DgseModel, x_row: np.ndarray, n_samples: int, rng: RngStream) -> float:
    """Single-row ITE; the row's noise comes from rng.child(0)"""
    x_row = np.asarray(x_row, dtype=float).reshape(1, -1)
    return float(dgse_ite_batch(model, x_row, n_samples, rng).ite[0])


def dgse_ate(model: DgseModel, dataset: Dataset, n_samples: int, rng: RngStream) -> float:
    """Mean per-row ITE over the dataset"""
    prediction = dgse_ite_batch(model, single_modality(dataset), n_samples, rng)
    return float(np.mean(prediction.ite))
