"""Normalisation, farthest point sampling, grid partitioning, block resampling and boxes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels

BLOCK_SIZE = 512
RESOLUTION = 7


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise GeometryError(f"{len(self.labels)} labels for {len(self.points)} points")
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Block:
    cell: tuple[int, int, int]
    sample: PointCloud
    source_indices: np.ndarray
    member_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Fit the bounding box into the unit cube: longest axis spans [0, 1], others centred."""
    pts = cloud.points
    if len(pts) == 0:
        raise GeometryError("cannot normalize an empty cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = hi - lo
    span = ext.max()
    if span <= 0:
        out = np.full_like(pts, 0.5)
    else:
        out = (pts - lo) / span + (1.0 - ext / span) / 2.0
        np.clip(out, 0.0, 1.0, out=out)
    return PointCloud(out, cloud.labels, cloud.provenance)


def fps(points, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    return kernels.fps(points, count, start)


def cell_of(points: np.ndarray, resolution: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise GeometryError("partition expects coordinates inside [0, 1]^3; normalize first")
    return np.minimum((pts * resolution).astype(np.int64), resolution - 1)


def partition(cloud: PointCloud, resolution: int = RESOLUTION) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """Uniform grid partition. Returns nonempty ``(cell, member indices)`` sorted by cell."""
    if resolution < 1:
        raise GeometryError("resolution must be positive")
    cells = cell_of(cloud.points, resolution)
    key = (cells[:, 0] * resolution + cells[:, 1]) * resolution + cells[:, 2]
    order = np.argsort(key, kind="stable")
    uniq, starts = np.unique(key[order], return_index=True)
    bounds = list(starts) + [len(order)]
    out = []
    for u, a, b in zip(uniq, bounds[:-1], bounds[1:]):
        cell = (int(u // (resolution * resolution)), int((u // resolution) % resolution), int(u % resolution))
        out.append((cell, np.sort(order[a:b])))
    return out


def resample_block(
    points: np.ndarray,
    labels: np.ndarray | None = None,
    size: int = BLOCK_SIZE,
    rng: np.random.Generator | None = None,
    cell: tuple[int, int, int] = (0, 0, 0),
    member_indices: np.ndarray | None = None,
) -> Block:
    """Bring one cell's points to exactly ``size`` samples.

    Dense cells are thinned by FPS started at the point nearest the centroid.
    Sparse cells keep every point, FPS-ordered from the same start, then pad
    with seeded random repeats.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise GeometryError("cannot resample an empty cell")
    start = int(np.argmin(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))
    if n >= size:
        local = fps(pts, size, start)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        order = fps(pts, n, start)
        local = np.concatenate([order, order[rng.integers(0, n, size - n)]])
    members = np.arange(n) if member_indices is None else np.asarray(member_indices, dtype=np.int64)
    sample = PointCloud(pts[local], None if labels is None else np.asarray(labels)[local], members[local])
    return Block(cell=cell, sample=sample, source_indices=members[local], member_indices=members)


def make_blocks(cloud: PointCloud, resolution: int = RESOLUTION, size: int = BLOCK_SIZE, seed: int = 0) -> list[Block]:
    """Partition a normalized cloud and resample every nonempty cell.

    Each cell gets its own generator seeded from ``(seed, cell)`` so results do
    not depend on processing order.
    """
    blocks = []
    for cell, members in partition(cloud, resolution):
        rng = np.random.default_rng([seed, *cell])
        labels = None if cloud.labels is None else cloud.labels[members]
        blocks.append(resample_block(cloud.points[members], labels, size, rng, cell, members))
    return blocks


def cell_local(points: np.ndarray, cell: tuple[int, int, int], resolution: int) -> np.ndarray:
    """Coordinates relative to the cell centre, in cell units (roughly [-0.5, 0.5])."""
    centre = (np.asarray(cell, dtype=np.float64) + 0.5) / resolution
    return (np.asarray(points) - centre) * resolution


def aabb_of(points) -> Aabb:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("aabb of an empty point list")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def aabb_intersect(a: Aabb, b: Aabb, epsilon: float = 0.0) -> bool:
    return bool(np.all(a.lo - epsilon <= b.hi + epsilon) and np.all(b.lo - epsilon <= a.hi + epsilon))


def median_nn_spacing(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(dist[:, 1]))


def adjacency_epsilon(points: np.ndarray, factor: float = 2.0) -> float:
    """Default AABB inflation: ``factor`` times the median nearest-neighbour spacing."""
    return factor * median_nn_spacing(points)
