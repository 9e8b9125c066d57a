"""
Shared minibatch training loop and the hyperparameter models every trainer reads
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from src.services.diffnet import AdamState, NetworkOptimizer
from src.utils.errors import TrainingError
from src.utils.rng import RngStream

logger = logging.getLogger(__name__)


def _int_tuple(value) -> Tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    return tuple(int(v) for v in value)


class TrainingConfig(BaseModel):
    """Optimizer and loop settings; defaults are echoed into every report"""

    epochs: int = Field(50, ge=0)
    lr: float = Field(0.01, gt=0)
    batch_size: int = Field(128, ge=1)
    clip_norm: Optional[float] = Field(None, gt=0)
    lr_decay: float = Field(1.0, gt=0, le=1.0)
    n_ite_samples: int = Field(100, ge=1)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, clip_norm=self.clip_norm, lr_decay=self.lr_decay)


class ModelConfig(BaseModel):
    """Architecture settings shared by the structural-equation models"""

    latent_dim: int = Field(20, ge=1)
    hidden: Tuple[int, ...] = (20, 20)
    outcome_variance: float = Field(1.0, gt=0)
    beta: float = Field(1.0, gt=0)
    subsets: Optional[int] = Field(None, ge=0)

    @field_validator("hidden", mode="before")
    @classmethod
    def _parse_hidden(cls, value):
        return _int_tuple(value)


@dataclass
class TrainingTrace:
    """Per-epoch mean objective (per row) and auxiliary term"""

    epochs: List[int] = field(default_factory=list)
    objective: List[float] = field(default_factory=list)
    aux_term: List[float] = field(default_factory=list)

    def append(self, epoch: int, objective: float, aux: float) -> None:
        self.epochs.append(epoch)
        self.objective.append(objective)
        self.aux_term.append(aux)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": self.epochs, "elbo": self.objective, "aux_term": self.aux_term})

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    def window_mean(self, fraction: float, last: bool) -> float:
        """Mean objective over the first or last `fraction` of epochs"""
        if not self.objective:
            return float("nan")
        width = max(1, int(math.ceil(fraction * len(self.objective))))
        values = self.objective[-width:] if last else self.objective[:width]
        return float(np.mean(values))


StepFunction = Callable[[np.ndarray, RngStream], Tuple[float, float]]


def run_epochs(
    step: StepFunction,
    n_rows: int,
    config: TrainingConfig,
    rng: RngStream,
    label: str = "model",
    optimizer: Optional[NetworkOptimizer] = None,
) -> TrainingTrace:
    """
    Drive `step` over shuffled minibatches for config.epochs epochs.

    Args:
        step: called with (row indices, batch stream); runs forward and
            backward and returns the batch's summed objective and auxiliary
            term. Without `optimizer` it must also apply its own update
        n_rows: number of training rows
        config: loop settings
        rng: training stream; epoch e draws its permutation from child(e)
        label: name used in log lines
        optimizer: when given, the loop descends on the accumulated ascent
            gradients scaled by 1/batch size, after checking that the
            objective and every gradient are finite

    Returns:
        TrainingTrace with one entry per epoch
    """
    trace = TrainingTrace()
    if n_rows == 0:
        raise TrainingError(f"{label}: no training rows", epoch=0)
    for epoch in range(config.epochs):
        epoch_rng = rng.child(epoch)
        order = epoch_rng.permutation(n_rows)
        total, aux_total = 0.0, 0.0
        for b, start in enumerate(range(0, n_rows, config.batch_size)):
            rows = np.sort(order[start:start + config.batch_size])
            value, aux = step(rows, epoch_rng.child(b + 1))
            if not (np.isfinite(value) and np.isfinite(aux)):
                raise TrainingError(f"{label}: non-finite objective", epoch=epoch)
            if optimizer is not None:
                if not all(np.all(np.isfinite(g)) for g in optimizer.grads()):
                    raise TrainingError(f"{label}: non-finite gradient", epoch=epoch)
                optimizer.step(scale=-1.0 / len(rows))
            total += value
            aux_total += aux
        trace.append(epoch, total / n_rows, aux_total / n_rows)
        logger.debug("%s epoch %d: objective %.6f aux %.6f", label, epoch, total / n_rows, aux_total / n_rows)
    if trace.objective:
        logger.info("%s trained for %d epochs, final objective %.4f", label, config.epochs, trace.objective[-1])
    return trace
