"""Central finite-difference oracle for tape gradients, evaluated in float64."""

from __future__ import annotations

import numpy as np

from .tensor import Grid, backward


def numeric_grad(fn, arrays: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of the scalar ``fn(*arrays)`` (plain float64 arrays in, float out)."""
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn(*arrays)
            flat[i] = old - h
            fm = fn(*arrays)
            flat[i] = old
            gf[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def tape_grad(build, arrays: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [Grid(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    backward(loss)
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest numeric gradient magnitude (floored at 1e-8)."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check(build, arrays: list[np.ndarray], h: float = 1e-3) -> float:
    """Max relative error between tape and finite-difference gradients of ``build``.

    ``build`` maps Grids to a scalar Grid; it is re-evaluated on plain arrays
    (wrapped as non-tracking Grids) for the numeric side.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = tape_grad(build, arrays)

    def value(*arrs):
        return float(build(*[Grid(a, dtype=np.float64) for a in arrs]).data)

    numeric = numeric_grad(value, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
