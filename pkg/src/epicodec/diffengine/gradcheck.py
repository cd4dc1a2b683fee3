"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor); scale-free but safe near zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    floor: float = 1e-6) -> float:
    """Worst relative error over all inputs that require grad.

    ``fn`` maps the inputs to a scalar Tensor. A random projection of the
    output would hide cancellations, so ``fn`` should already reduce to a
    scalar that depends on every element.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = numeric_grad(lambda: float(fn(*inputs).data), t.data, step)
        worst = max(worst, max_relative_error(analytic, num, floor))
    return worst
