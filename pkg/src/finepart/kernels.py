"""Hot-loop dispatch: compiled Cython kernels when built, numpy otherwise.

Set ``FINEPART_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("FINEPART_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def fps(points, count: int, start: int = 0) -> np.ndarray:
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"fps: expected (n, d) points, got shape {pts.shape}")
    n = pts.shape[0]
    if count < 1 or count > n:
        raise ValueError(f"fps: count {count} outside 1..{n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start {start} outside 0..{n - 1}")
    return _impl.fps(pts, int(count), int(start))


def fps_from_distances(dist, count: int, start: int = 0) -> np.ndarray:
    d = np.ascontiguousarray(dist, dtype=np.float64)
    n = d.shape[0]
    if count < 1 or count > n or not 0 <= start < n:
        raise ValueError(f"fps_from_distances: bad count/start for n={n}")
    return _impl.fps_from_distances(d, int(count), int(start))


def aabb_overlap_pairs(mins, maxs, eps: float = 0.0) -> np.ndarray:
    """All ``(i, j)``, ``i < j``, whose boxes overlap after inflating both by ``eps``; row-major order."""
    lo = np.ascontiguousarray(mins, dtype=np.float64).reshape(-1, 3)
    hi = np.ascontiguousarray(maxs, dtype=np.float64).reshape(-1, 3)
    return _impl.aabb_overlap_pairs(lo, hi, float(eps))
