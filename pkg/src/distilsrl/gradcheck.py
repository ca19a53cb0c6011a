"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Coordinate-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true derivative is ~0 from dividing
    rounding noise by rounding noise.
    """
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences; only the flat indices in ``coords`` when given (others stay 0)."""
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        g[i] = (plus - minus) / (2 * step)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences over ``inputs``.

    ``fn`` rebuilds the graph from the (mutated in place) ``inputs`` and returns
    a scalar.  Inputs must be float64.  With ``max_coords``, each input is
    probed at that many coordinates drawn from ``rng`` instead of all of them.

    The relative-error floor is ``1e-6 * max(1, |f|)``: central differences of
    ``f`` carry rounding noise proportional to ``|f|``, which would otherwise be
    scored against gradients that are exactly zero.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
    with precision(np.float64):
        root = fn()
        floor = 1e-6 * max(1.0, abs(root.item()))
        backward(root, inputs=inputs)
        worst = 0.0
        for t in inputs:
            coords = None
            if max_coords is not None and t.size > max_coords:
                coords = np.sort((rng or np.random.default_rng(0)).choice(t.size, max_coords, replace=False))
            num = numerical_gradient(fn, t, step, coords)
            ana = t.grad.reshape(-1) if coords is None else t.grad.reshape(-1)[coords]
            num = num.reshape(-1) if coords is None else num.reshape(-1)[coords]
            worst = max(worst, float(relative_error(ana, num, floor).max(initial=0.0)))
    return worst
