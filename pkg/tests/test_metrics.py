import numpy as np
import pytest

from src.services.metrics import ate_error, gwas_score, r_squared
from src.utils.errors import DimensionError, DomainError


def test_ate_error():
    assert ate_error(-0.25, 0.0) == 0.25


def test_gwas_score_worked_example():
    score = gwas_score([0.9, 0.1, 2.0, 0.5], [1.0, 0.0, -2.0, 0.0])
    assert score.threshold == 0.5
    assert (score.tp, score.tn, score.fp, score.fn) == (1, 1, 2, 0)
    assert score.precision == pytest.approx(1 / 3)
    assert score.recall == 1.0
    assert score.l1 == pytest.approx(4.7)
    assert score.l2 == pytest.approx(np.sqrt(16.27))


def test_gwas_score_false_negative():
    score = gwas_score([0.1, 0.0], [1.0, 0.0])
    assert (score.tp, score.tn, score.fp, score.fn) == (0, 1, 0, 1)
    assert score.precision == 0.0 and score.recall == 0.0


def test_gwas_counts_cover_every_snp():
    rng = np.random.default_rng(0)
    truth = np.where(rng.random(50) < 0.3, rng.normal(size=50), 0.0)
    truth[0] = 1.0
    score = gwas_score(rng.normal(size=50), truth)
    assert score.tp + score.tn + score.fp + score.fn == 50


def test_gwas_score_needs_a_causal_snp():
    with pytest.raises(DomainError):
        gwas_score([0.1, 0.2], [0.0, 0.0])


def test_gwas_score_length_mismatch():
    with pytest.raises(DimensionError):
        gwas_score([0.1, 0.2], [1.0])


def test_r_squared():
    assert r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
    with pytest.raises(DomainError):
        r_squared([1.0, 1.0], [1.0, 1.0])
