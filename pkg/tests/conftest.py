"""Shared test helpers: finite-difference gradients and small fixtures."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))


def numeric_grad(loss_fn, arrays: dict[str, np.ndarray], eps: float = 1e-6):
    """Central finite differences of ``loss_fn()`` w.r.t. each array.

    The arrays are perturbed in place, so ``loss_fn`` must read from the
    same storage (e.g. Tensor.data views).  Returns name -> gradient.
    """
    grads = {}
    for name, a in arrays.items():
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def rel_max(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise relative difference with an absolute floor."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
