"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np


def fps(points: np.ndarray, count: int, start: int) -> np.ndarray:
    n = points.shape[0]
    out = np.empty(count, dtype=np.int64)
    mind = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    cur = start
    for k in range(count):
        out[k] = cur
        taken[cur] = True
        if k + 1 == count:
            break
        diff = points - points[cur]
        acc = diff[:, 0] * diff[:, 0]
        for d in range(1, points.shape[1]):
            acc = acc + diff[:, d] * diff[:, d]
        np.minimum(mind, acc, out=mind)
        cand = np.where(taken, -1.0, mind)
        cur = int(np.argmax(cand))
    return out


def fps_from_distances(dist: np.ndarray, count: int, start: int) -> np.ndarray:
    n = dist.shape[0]
    out = np.empty(count, dtype=np.int64)
    mind = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    cur = start
    for k in range(count):
        out[k] = cur
        taken[cur] = True
        if k + 1 == count:
            break
        np.minimum(mind, dist[cur], out=mind)
        cur = int(np.argmax(np.where(taken, -1.0, mind)))
    return out


def aabb_overlap_pairs(mins: np.ndarray, maxs: np.ndarray, eps: float) -> np.ndarray:
    lo = mins - eps
    hi = maxs + eps
    ok = np.all((lo[:, None, :] <= hi[None, :, :]) & (lo[None, :, :] <= hi[:, None, :]), axis=2)
    i, j = np.nonzero(np.triu(ok, k=1))
    return np.stack([i, j], axis=1).astype(np.int64)
