import numpy as np
import pytest

from finepart.evaluation import (
    REPORT_COLUMNS, EvalError, SegmentationResult, avg_iou, block_stats, hungarian_iou, small_part_iou, summarize,
    write_report,
)
from finepart.geometry import PointCloud


def brute_avg_iou(pred, gt):
    vals = []
    for p in np.unique(pred):
        P = set(np.nonzero(pred == p)[0])
        vals.append(max(len(P & set(np.nonzero(gt == g)[0])) / len(P | set(np.nonzero(gt == g)[0])) for g in np.unique(gt)))
    return float(np.mean(vals))


def test_hand_computed_seven_twelfths():
    rep = avg_iou(SegmentationResult([0, 1, 1, 1], [0, 0, 1, 1]))
    np.testing.assert_allclose(rep.part_iou, [0.5, 2 / 3])
    assert rep.avg_iou == pytest.approx(7 / 12)


def test_identical_up_to_relabeling_is_one():
    gt = np.array([0, 0, 1, 2, 2, 2])
    assert avg_iou(SegmentationResult(np.array([5, 5, 9, 1, 1, 1]), gt)).avg_iou == 1.0


def test_one_part_over_two_equal_parts_is_half():
    assert avg_iou(SegmentationResult(np.zeros(10, int), np.repeat([0, 1], 5))).avg_iou == pytest.approx(0.5)


def test_relabeling_invariance_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        pred, gt = rng.integers(0, 4, n), rng.integers(0, 4, n)
        want = brute_avg_iou(pred, gt)
        perm_p, perm_g = rng.permutation(10), rng.permutation(10)
        got = avg_iou(SegmentationResult(perm_p[pred], perm_g[gt])).avg_iou
        assert got == pytest.approx(want, abs=1e-12)


def test_iou_is_one_only_for_equal_partitions():
    rng = np.random.default_rng(1)
    for _ in range(50):
        gt = rng.integers(0, 3, 12)
        pred = rng.integers(0, 3, 12)
        same = len({(a, b) for a, b in zip(pred, gt)}) == len(np.unique(pred)) == len(np.unique(gt))
        assert (avg_iou(SegmentationResult(pred, gt)).avg_iou == 1.0) == same


def test_errors():
    with pytest.raises(EvalError):
        avg_iou(SegmentationResult([], []))
    with pytest.raises(EvalError):
        SegmentationResult([0, 1], [0])
    with pytest.raises(EvalError):
        SegmentationResult([-1], [0])


def _two_part_cloud(small_size):
    big = np.random.default_rng(0).random((50, 3))
    small = 0.5 + np.random.default_rng(1).random((10, 3)) * small_size
    return np.concatenate([big, small]), np.repeat([0, 1], [50, 10])


def test_small_part_metric():
    pts, gt = _two_part_cloud(0.01)
    pred = gt.copy()
    pred[:5] = 1  # small part now overlaps 10 / 15
    res = SegmentationResult(pred, gt, "s", pts)
    assert small_part_iou(res) == pytest.approx(10 / 15)
    assert avg_iou(res).small_iou == pytest.approx(10 / 15)
    # no small parts: absent
    spread = np.concatenate([np.zeros((1, 3)), np.ones((1, 3))])
    assert small_part_iou(SegmentationResult([0, 1], [0, 0], "t", spread)) is None
    with pytest.raises(EvalError):
        small_part_iou(res, 1.5)


def test_all_parts_small_equals_average():
    pts = np.array([[0, 0, 0], [0.01, 0, 0], [1, 1, 1], [1.01, 1, 1], [0.5, 0.5, 0.5], [0.51, 0.5, 0.5]])
    res = SegmentationResult([0, 0, 1, 1, 1, 2], [0, 0, 1, 1, 2, 2], "x", pts)
    rep = avg_iou(res)
    assert rep.small_iou == pytest.approx(rep.avg_iou)


def test_hungarian_is_a_separate_diagnostic():
    res = SegmentationResult(np.zeros(10, int), np.repeat([0, 1], 5))
    assert hungarian_iou(res) == pytest.approx(0.25)


def test_block_stats():
    rng = np.random.default_rng(2)
    single = [PointCloud(rng.random((400, 3)), np.zeros(400, int)) for _ in range(3)]
    hist, frac = block_stats(single, 4)
    assert list(hist) == [1] and frac == 1.0
    mixed = [PointCloud(rng.random((400, 3)), rng.integers(0, 8, 400))]
    hist, frac = block_stats(mixed, 3)
    from finepart.geometry import partition
    assert sum(hist.values()) == len(partition(mixed[0], 3))
    with pytest.raises(EvalError):
        block_stats([PointCloud(np.zeros((1, 3)))])


def test_report_file(tmp_path):
    reps = [avg_iou(SegmentationResult([0, 1], [0, 1], "b")), avg_iou(SegmentationResult([0, 0], [0, 1], "a"))]
    summary = write_report(tmp_path / "r.tsv", reps, [1.0, 0.5])
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(REPORT_COLUMNS)
    assert [l.split("\t")[0] for l in lines[1:]] == ["a", "b", "#summary"]
    assert summary == summarize(reps)
    assert summary["avg_iou"] == pytest.approx(0.75)
    with pytest.raises(EvalError):
        summarize([])
