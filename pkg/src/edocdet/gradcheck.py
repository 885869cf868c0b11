"""Central finite-difference gradient verification.

Runs in float64: callers build the graph from float64 leaves so rounding
noise stays far below the comparison tolerance.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, zero_grads


def numeric_gradient(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-3) -> np.ndarray:
    """d fn / d leaf, elementwise, via central differences on the leaf data."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn().item()
        flat[i] = orig - step
        f_minus = fn().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    step: float = 1e-3, rtol: float = 1e-3) -> float:
    """Backprop fn() and compare every leaf gradient against finite differences.

    Returns the worst relative error; raises AssertionError beyond rtol.
    """
    zero_grads(leaves)
    fn().backward()
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf received no gradient"
        num = numeric_gradient(fn, leaf, step)
        err = max_relative_error(leaf.grad, num)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradient mismatch: rel error {err:.3e} > {rtol:.1e}")
    return worst
