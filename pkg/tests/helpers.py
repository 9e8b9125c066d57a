"""
Shared test fixtures: finite-difference gradient checks and small synthetic datasets
"""
from typing import Callable, Dict

import numpy as np

from src.services.datagen import Dataset
from src.services.diffnet import MlpFunction
from src.utils.rng import RngStream


def check_gradients(
    networks: Dict[str, MlpFunction],
    value_fn: Callable[[], float],
    grad_fn: Callable[[], None],
    n_checks: int = 20,
    seed: int = 0,
    h: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> int:
    """
    Compare accumulated gradients against central differences of value_fn.

    grad_fn must add d value / d params into the networks' buffers (which
    are zeroed here first). Returns the number of parameters checked.
    """
    for net in networks.values():
        net.zero_grad()
    grad_fn()
    picker = np.random.default_rng(seed)
    checked = 0
    for name in sorted(networks):
        net = networks[name]
        analytic = net.gradient_vector()
        theta = net.parameter_vector()
        picks = picker.choice(theta.size, size=min(n_checks, theta.size), replace=False)
        numeric = []
        for i in picks:
            bumped = theta.copy()
            bumped[i] += h
            net.set_parameter_vector(bumped)
            up = value_fn()
            bumped[i] -= 2.0 * h
            net.set_parameter_vector(bumped)
            down = value_fn()
            numeric.append((up - down) / (2.0 * h))
        net.set_parameter_vector(theta)
        np.testing.assert_allclose(analytic[picks], numeric, rtol=rtol, atol=atol, err_msg=name)
        checked += len(picks)
    return checked


def two_modality_dataset(n: int = 6, seed: int = 0, mask_b=None) -> Dataset:
    """Bernoulli modality 'a' (width 3), Gaussian modality 'b' (width 2), binary t and y"""
    rng = RngStream(seed)
    masks = {} if mask_b is None else {"b": np.asarray(mask_b, dtype=bool)}
    return Dataset(
        modalities={
            "a": rng.bernoulli(np.full((n, 3), 0.5)).astype(float),
            "b": rng.normal((n, 2)),
        },
        treatment=rng.bernoulli(np.full(n, 0.5)).astype(float),
        outcome=rng.bernoulli(np.full(n, 0.5)).astype(float),
        modality_kinds={"a": "bernoulli", "b": "gaussian"},
        missing_mask=masks,
    )
