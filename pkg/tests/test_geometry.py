import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finepart import _pykernels, kernels
from finepart.geometry import (
    Aabb, GeometryError, PointCloud, aabb_intersect, aabb_of, adjacency_epsilon, cell_local, cell_of, fps,
    make_blocks, normalize_cloud, partition, resample_block,
)


def greedy_fps(points, count, start=0):
    """Quadratic reference: recompute every min-distance from scratch each round."""
    chosen = [start]
    for _ in range(count - 1):
        best, best_d = -1, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(float(((points[i] - points[j]) ** 2).sum()) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def test_fps_examples():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0.5, 0, 0], [0.9, 0, 0]])
    np.testing.assert_array_equal(fps(pts, 3), [0, 1, 2])
    # ties: two points equally far from the start, the lower index wins
    sym = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    np.testing.assert_array_equal(fps(sym, 2), [0, 1])


@pytest.mark.parametrize("seed", range(20))
def test_fps_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    pts = rng.random((n, 3))
    k = int(rng.integers(1, n + 1))
    np.testing.assert_array_equal(fps(pts, k), greedy_fps(pts, k))


def test_fps_with_duplicates_takes_every_distinct_point_first():
    pts = np.array([[0.0, 0, 0]] * 3 + [[1.0, 1, 1]] * 2)
    out = fps(pts, 5)
    assert set(out[:2].tolist()) == {0, 3}
    assert sorted(out.tolist()) == [0, 1, 2, 3, 4]


def test_fps_errors():
    with pytest.raises(ValueError):
        fps(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        fps(np.zeros((3, 3)), 1, start=5)


@pytest.mark.parametrize("name", ["fps", "fps_from_distances", "aabb_overlap_pairs"])
def test_backends_agree(name):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    from finepart import _kernels

    rng = np.random.default_rng(7)
    for _ in range(10):
        if name == "fps":
            args = (rng.random((300, 3)), 100, 3)
        elif name == "fps_from_distances":
            f = rng.random((80, 4))
            args = (np.sqrt(((f[:, None] - f[None]) ** 2).sum(-1)), 80, 0)
        else:
            lo = rng.random((150, 3))
            args = (lo, lo + rng.random((150, 3)) * 0.1, 0.01)
        np.testing.assert_array_equal(getattr(_kernels, name)(*args), getattr(_pykernels, name)(*args))


def test_normalize_cloud_fits_unit_cube():
    rng = np.random.default_rng(0)
    cloud = normalize_cloud(PointCloud(rng.normal(size=(500, 3)) * [5, 1, 2] + 10))
    assert cloud.points.min() >= 0.0 and cloud.points.max() <= 1.0
    ext = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    assert ext.max() == pytest.approx(1.0)
    # shorter axes are centred
    mid = (cloud.points.max(axis=0) + cloud.points.min(axis=0)) / 2
    np.testing.assert_allclose(mid[1:], 0.5, atol=1e-12)


def test_normalize_degenerate_and_empty():
    assert np.all(normalize_cloud(PointCloud(np.ones((4, 3)))).points == 0.5)
    with pytest.raises(GeometryError):
        normalize_cloud(PointCloud(np.zeros((0, 3))))


def test_cell_of_boundaries():
    np.testing.assert_array_equal(cell_of(np.array([[0.0, 0.5, 1.0]]), 7), [[0, 3, 6]])
    with pytest.raises(GeometryError):
        cell_of(np.array([[1.2, 0, 0]]), 7)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10_000))
def test_partition_covers_every_point_once(res, seed):
    pts = np.random.default_rng(seed).random((300, 3))
    cells = partition(PointCloud(pts), res)
    allm = np.concatenate([m for _, m in cells])
    np.testing.assert_array_equal(np.sort(allm), np.arange(300))
    assert [c for c, _ in cells] == sorted(c for c, _ in cells)
    for cell, members in cells:
        assert np.all(cell_of(pts[members], res) == cell)


def test_resample_dense_and_sparse():
    rng = np.random.default_rng(1)
    dense = resample_block(rng.random((2000, 3)), np.zeros(2000, dtype=int), 512, rng)
    assert len(dense.sample.points) == 512
    assert len(np.unique(dense.source_indices)) == 512
    sparse = resample_block(rng.random((40, 3)), None, 512, np.random.default_rng(2), member_indices=np.arange(100, 140))
    assert len(sparse.sample.points) == 512
    assert set(sparse.source_indices.tolist()) == set(range(100, 140))
    np.testing.assert_array_equal(sparse.sample.provenance, sparse.source_indices)


def test_make_blocks_provenance_and_determinism():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.random((5000, 3)), rng.integers(0, 4, 5000))
    a = make_blocks(cloud, 4, 64, seed=9)
    b = make_blocks(cloud, 4, 64, seed=9)
    for x, y in zip(a, b):
        assert x.cell == y.cell
        np.testing.assert_array_equal(x.source_indices, y.source_indices)
        np.testing.assert_array_equal(cloud.points[x.source_indices], x.sample.points)
        np.testing.assert_array_equal(cloud.labels[x.source_indices], x.sample.labels)
        assert set(x.source_indices.tolist()) <= set(x.member_indices.tolist())
    assert sum(len(x.member_indices) for x in a) == 5000


def test_cell_local_centres_cells():
    np.testing.assert_allclose(cell_local(np.array([[0.5, 0.5, 0.5]]), (3, 3, 3), 7), [[0.0, 0.0, 0.0]], atol=1e-12)


def test_aabb_helpers():
    a = aabb_of([[0, 0, 0], [1, 1, 1]])
    b = Aabb(np.array([1.05, 0, 0]), np.array([2.0, 1, 1]))
    assert a.diagonal == pytest.approx(np.sqrt(3))
    assert not aabb_intersect(a, b)
    assert aabb_intersect(a, b, epsilon=0.03)
    with pytest.raises(GeometryError):
        aabb_of(np.zeros((0, 3)))


def test_overlap_pairs_match_pairwise_test():
    rng = np.random.default_rng(4)
    lo = rng.random((60, 3))
    hi = lo + rng.random((60, 3)) * 0.2
    got = {tuple(p) for p in kernels.aabb_overlap_pairs(lo, hi, 0.01).tolist()}
    want = {(i, j) for i in range(60) for j in range(i + 1, 60)
            if aabb_intersect(Aabb(lo[i], hi[i]), Aabb(lo[j], hi[j]), 0.01)}
    assert got == want


def test_adjacency_epsilon_grid():
    g = np.stack(np.meshgrid(*[np.arange(5) * 0.1] * 3), -1).reshape(-1, 3)
    assert adjacency_epsilon(g) == pytest.approx(0.2)
