"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = fn().item()
            flat[i] = original - step
            minus = fn().item()
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    reference: Optional[Callable[[], Tensor]] = None,
) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    ``fn`` must rebuild the scalar output from the current ``inputs`` data on
    every call. When ``reference`` is given, finite differences are taken of
    it instead of ``fn``. The error is measured against the largest gradient
    entry so that near-zero components do not dominate.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(reference or fn, t, step)))
    return worst
