"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one tab-separated row per kernel and problem size with the best wall
time of each backend and the speedup. Both backends are also checked to give
identical results on every input.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from finepart import _pykernels

try:
    from finepart import _kernels
except ImportError:  # pragma: no cover - extension not built
    _kernels = None


def best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng: np.random.Generator):
    for n, k in ((2_000, 512), (20_000, 512), (20_000, 2_048)):
        pts = rng.random((n, 3))
        yield f"fps n={n} k={k}", "fps", (pts, k, 0)
    for n in (512,):
        f = rng.standard_normal((n, 128))
        d = np.sqrt(np.maximum(((f[:, None, :] - f[None, :, :]) ** 2).sum(-1), 0.0))
        yield f"fps_from_distances n={n}", "fps_from_distances", (d, n, 0)
    for n in (200, 1_000, 4_000):
        lo = rng.random((n, 3))
        hi = lo + rng.random((n, 3)) * 0.05
        yield f"aabb_overlap_pairs n={n}", "aabb_overlap_pairs", (lo, hi, 0.002)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print("case\tpython_s\tcython_s\tspeedup")
    for label, name, call_args in cases(np.random.default_rng(args.seed)):
        py, cy = getattr(_pykernels, name), getattr(_kernels, name)
        if not np.array_equal(py(*call_args), cy(*call_args)):
            raise SystemExit(f"backends disagree on {label}")
        t_py = best_time(lambda: py(*call_args), args.repeat)
        t_cy = best_time(lambda: cy(*call_args), args.repeat)
        print(f"{label}\t{t_py:.5f}\t{t_cy:.5f}\t{t_py / t_cy:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
