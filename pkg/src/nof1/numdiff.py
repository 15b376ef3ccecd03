"""Central-difference stencils evaluated through batched objective calls.

The outer optimization differentiates objectives whose evaluation is cheap
but Python-call dominated, so every stencil is assembled into one (B, dim)
array and evaluated in a single vectorized call.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

BatchFn = Callable[[np.ndarray], np.ndarray]


def batch_gradient(f_batch: BatchFn, x: np.ndarray, rel_step: float) -> np.ndarray:
    """Central-difference gradient, one batched evaluation of 2*dim points."""
    x = np.asarray(x, dtype=float)
    dim = x.size
    steps = rel_step * (1.0 + np.abs(x))
    pts = np.tile(x, (2 * dim, 1))
    idx = np.arange(dim)
    pts[2 * idx, idx] += steps
    pts[2 * idx + 1, idx] -= steps
    vals = np.asarray(f_batch(pts), dtype=float)
    return (vals[0::2] - vals[1::2]) / (2.0 * steps)


def batch_hessian(f_batch: BatchFn, x: np.ndarray, rel_step: float) -> np.ndarray:
    """Central-difference Hessian, one batched evaluation.

    Uses the standard 3-point diagonal and 4-point cross stencils:
    1 + 2*dim + 2*dim*(dim-1) points in total.
    """
    x = np.asarray(x, dtype=float)
    dim = x.size
    steps = rel_step * (1.0 + np.abs(x))
    points = [x]
    for k in range(dim):
        xp = x.copy(); xp[k] += steps[k]
        xm = x.copy(); xm[k] -= steps[k]
        points.append(xp)
        points.append(xm)
    pairs = [(k, l) for k in range(dim) for l in range(k + 1, dim)]
    for k, l in pairs:
        for sk, sl in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            xp = x.copy()
            xp[k] += sk * steps[k]
            xp[l] += sl * steps[l]
            points.append(xp)
    vals = np.asarray(f_batch(np.array(points)), dtype=float)
    f0 = vals[0]
    H = np.zeros((dim, dim))
    for k in range(dim):
        fp, fm = vals[1 + 2 * k], vals[2 + 2 * k]
        H[k, k] = (fp - 2.0 * f0 + fm) / steps[k] ** 2
    base = 1 + 2 * dim
    for idx, (k, l) in enumerate(pairs):
        fpp, fpm, fmp, fmm = vals[base + 4 * idx: base + 4 * idx + 4]
        H[k, l] = H[l, k] = (fpp - fpm - fmp + fmm) / (4.0 * steps[k] * steps[l])
    return 0.5 * (H + H.T)
