"""Central finite-difference oracle, independent of the backward pass."""

from __future__ import annotations

import numpy as np

STEP = 1e-4
# Below this magnitude a gradient is zero up to rounding (e.g. a bias feeding batch norm).
ZERO_FLOOR = 1e-8


def numeric_grad(f, arrays, step: float = STEP) -> list[np.ndarray]:
    """d f() / d arrays[k], perturbing each array in place; f returns a float."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), ZERO_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def flat_rel_error(analytic, numeric) -> float:
    """rel_error over the concatenation of several gradient arrays.

    Used for whole networks, where some parameters (a bias feeding batch norm)
    have an exactly zero gradient and only rounding noise survives in their
    finite-difference estimate; scaling by the network-wide gradient keeps
    that noise from being read as a relative error of order one.
    """
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return rel_error(a, n)
