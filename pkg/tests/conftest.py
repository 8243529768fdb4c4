"""Shared oracles and helpers.

The finite-difference gradient oracle lives here, outside the package,
so the analytic backward rules never get to grade their own homework.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest


def finite_difference(forward: Callable[[], float], arrays: Sequence[np.ndarray],
                      step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function w.r.t. in-place arrays.

    ``forward`` must re-evaluate the function from the current contents of
    ``arrays``; each entry is perturbed elementwise and restored.
    """
    grads = []
    for arr in arrays:
        if arr.dtype != np.float64:
            raise AssertionError("finite differences need f64 buffers")
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = forward()
            flat[i] = orig - step
            lo = forward()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(grad)
    return grads


def max_rel_err(got, want, floor: float = 1e-6) -> float:
    """Largest elementwise relative error, ignoring entries both below ``floor``."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = np.maximum(np.abs(got), np.abs(want))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float((np.abs(got - want)[mask] / scale[mask]).max())


@pytest.fixture
def rng():
    return np.random.default_rng(20240331)
