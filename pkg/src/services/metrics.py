"""
Scoring: ATE error, effect-vector error, GWAS classification counts, R²
"""
from dataclasses import asdict, dataclass

import numpy as np

from src.utils.errors import DimensionError, DomainError


def ate_error(estimated: float, truth: float) -> float:
    return float(abs(estimated - truth))


@dataclass
class GwasScore:
    l1: float
    l2: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    threshold: float

    def as_dict(self) -> dict:
        return asdict(self)


def gwas_score(estimated, truth) -> GwasScore:
    """
    Classify each SNP against τ = min_{γ*≠0} |γ*| / 2:

    tp: γ* ≠ 0, |γ̂| > τ, same sign; tn: γ* = 0, |γ̂| < τ;
    fn: γ* ≠ 0, |γ̂| < τ; fp: everything else (including wrong signs
    and |γ̂| = τ exactly).
    """
    estimated = np.asarray(estimated, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimated.shape != truth.shape or estimated.ndim != 1:
        raise DimensionError("estimated and true effect vectors must be 1-D and equal length")
    causal = truth != 0
    if not causal.any():
        raise DomainError("threshold undefined: every true effect is zero")
    tau = float(np.min(np.abs(truth[causal])) / 2.0)
    size = np.abs(estimated)

    tp_mask = causal & (size > tau) & (np.sign(estimated) == np.sign(truth))
    tn_mask = ~causal & (size < tau)
    fn_mask = causal & (size < tau)
    fp_mask = ~(tp_mask | tn_mask | fn_mask)
    tp, tn, fn, fp = (int(mask.sum()) for mask in (tp_mask, tn_mask, fn_mask, fp_mask))

    diff = estimated - truth
    return GwasScore(
        l1=float(np.sum(np.abs(diff))),
        l2=float(np.sqrt(np.sum(diff ** 2))),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        threshold=tau,
    )


def r_squared(predicted, actual) -> float:
    """1 − SS_res / SS_tot"""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise DimensionError("predicted and actual lengths differ")
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        raise DomainError("R² undefined for a constant target")
    return 1.0 - float(np.sum((actual - predicted) ** 2)) / ss_tot
