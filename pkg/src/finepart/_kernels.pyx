# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics are identical to finepart._pykernels."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def fps(const double[:, ::1] points, Py_ssize_t count, Py_ssize_t start):
    cdef Py_ssize_t n = points.shape[0], dim = points.shape[1]
    cdef Py_ssize_t i, k, d, best, cur
    cdef double acc, diff, bestval
    out = np.empty(count, dtype=np.int64)
    cdef long long[::1] o = out
    mind_arr = np.full(n, np.inf)
    cdef double[::1] mind = mind_arr
    cdef unsigned char[::1] taken = np.zeros(n, dtype=np.uint8)
    cur = start
    for k in range(count):
        o[k] = cur
        taken[cur] = 1
        if k + 1 == count:
            break
        best = -1
        bestval = -1.0
        for i in range(n):
            if taken[i]:
                continue
            acc = 0.0
            for d in range(dim):
                diff = points[i, d] - points[cur, d]
                acc = acc + diff * diff
            if acc < mind[i]:
                mind[i] = acc
            if mind[i] > bestval:
                bestval = mind[i]
                best = i
        cur = best
    return out


def fps_from_distances(const double[:, ::1] dist, Py_ssize_t count, Py_ssize_t start):
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t i, k, best, cur
    cdef double bestval, v
    out = np.empty(count, dtype=np.int64)
    cdef long long[::1] o = out
    mind_arr = np.full(n, np.inf)
    cdef double[::1] mind = mind_arr
    cdef unsigned char[::1] taken = np.zeros(n, dtype=np.uint8)
    cur = start
    for k in range(count):
        o[k] = cur
        taken[cur] = 1
        if k + 1 == count:
            break
        best = -1
        bestval = -1.0
        for i in range(n):
            if taken[i]:
                continue
            v = dist[cur, i]
            if v < mind[i]:
                mind[i] = v
            if mind[i] > bestval:
                bestval = mind[i]
                best = i
        cur = best
    return out


def aabb_overlap_pairs(const double[:, ::1] mins, const double[:, ::1] maxs, double eps):
    cdef Py_ssize_t n = mins.shape[0]
    cdef Py_ssize_t i, j, d
    cdef bint ok
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            ok = True
            for d in range(3):
                if mins[i, d] - eps > maxs[j, d] + eps or mins[j, d] - eps > maxs[i, d] + eps:
                    ok = False
                    break
            if ok:
                pairs.append((i, j))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)
