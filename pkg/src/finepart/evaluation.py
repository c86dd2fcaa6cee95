"""Label-free segmentation metrics and dataset statistics.

The average IoU matches every *predicted* part to its best ground-truth part
and averages over predicted parts. Ground-truth parts that no prediction
matches are not penalised directly; this asymmetry is intentional.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import PointCloud, partition
from .synthdata import SMALL_PART_FRACTION


class EvalError(ValueError):
    pass


@dataclass
class SegmentationResult:
    pred: np.ndarray
    gt: np.ndarray
    shape_id: str = ""
    points: np.ndarray | None = None

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.int64)
        self.gt = np.asarray(self.gt, dtype=np.int64)
        if self.pred.shape != self.gt.shape:
            raise EvalError(f"prediction covers {len(self.pred)} points, ground truth {len(self.gt)}")
        if len(self.pred) and (self.pred.min() < 0 or self.gt.min() < 0):
            raise EvalError("part ids must be nonnegative")


@dataclass
class IouReport:
    shape_id: str
    part_iou: np.ndarray  # best IoU per predicted part, in order of sorted predicted ids
    best_gt: np.ndarray  # matched gt id per predicted part
    avg_iou: float
    small_iou: float | None
    pred_parts: int
    gt_parts: int


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersection counts between compacted predicted ids (rows) and gt ids (columns)."""
    pu, pi = np.unique(pred, return_inverse=True)
    gu, gi = np.unique(gt, return_inverse=True)
    inter = np.zeros((len(pu), len(gu)), dtype=np.int64)
    np.add.at(inter, (pi, gi), 1)
    return inter, pu, gu


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inter, pu, gu = confusion(pred, gt)
    union = inter.sum(axis=1)[:, None] + inter.sum(axis=0)[None, :] - inter
    return inter / union, pu, gu


def avg_iou(result: SegmentationResult, small_threshold: float = SMALL_PART_FRACTION) -> IouReport:
    if len(result.pred) == 0:
        raise EvalError("empty prediction")
    iou, pu, gu = iou_matrix(result.pred, result.gt)
    best = np.argmax(iou, axis=1)
    per_part = iou[np.arange(len(pu)), best]
    small = None
    if result.points is not None:
        small = small_part_iou(result, small_threshold, _cache=(iou, gu, best, per_part))
    return IouReport(result.shape_id, per_part, gu[best], float(per_part.mean()), small, len(pu), len(gu))


def small_part_iou(result: SegmentationResult, threshold: float = SMALL_PART_FRACTION, _cache=None) -> float | None:
    """Average IoU over predicted parts whose best-matching gt part is tiny.

    Tiny means the gt part's AABB diagonal is below ``threshold`` times the
    shape diagonal. Returns ``None`` when no predicted part qualifies.
    """
    if result.points is None:
        raise EvalError("small_part_iou needs point coordinates")
    if not 0.0 < threshold < 1.0:
        raise EvalError("threshold must lie in (0, 1)")
    if _cache is None:
        iou, pu, gu = iou_matrix(result.pred, result.gt)
        best = np.argmax(iou, axis=1)
        per_part = iou[np.arange(len(pu)), best]
    else:
        iou, gu, best, per_part = _cache
    pts = np.asarray(result.points)
    diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
    tiny = np.zeros(len(gu), dtype=bool)
    for k, g in enumerate(gu):
        sel = pts[result.gt == g]
        tiny[k] = np.linalg.norm(sel.max(axis=0) - sel.min(axis=0)) < threshold * diag
    keep = tiny[best]
    if not keep.any():
        return None
    return float(per_part[keep].mean())


def hungarian_iou(result: SegmentationResult) -> float:
    """Diagnostic only, not the headline metric: one-to-one matching, averaged over gt parts."""
    iou, _, gu = iou_matrix(result.pred, result.gt)
    rows, cols = linear_sum_assignment(-iou)
    return float(iou[rows, cols].sum() / len(gu))


def block_stats(clouds: Iterable[PointCloud], resolution: int = 7, cap: int = 5) -> tuple[dict[int, int], float]:
    """Histogram of ground-truth segment counts per nonempty block, and the fraction with count <= cap."""
    hist: dict[int, int] = {}
    for cloud in clouds:
        if cloud.labels is None:
            raise EvalError("block_stats needs labeled clouds")
        for _, members in partition(cloud, resolution):
            c = len(np.unique(cloud.labels[members]))
            hist[c] = hist.get(c, 0) + 1
    total = sum(hist.values())
    frac = sum(v for k, v in hist.items() if k <= cap) / total if total else 1.0
    return dict(sorted(hist.items())), frac


REPORT_COLUMNS = ("shape_id", "avg_iou", "small_iou", "pred_parts", "gt_parts", "hungarian_iou")


def write_report(path, reports: Sequence[IouReport], hungarian: Sequence[float] | None = None) -> dict[str, float]:
    """Tab-separated per-shape rows (sorted by shape id) plus a closing ``#summary`` row."""
    order = sorted(range(len(reports)), key=lambda i: reports[i].shape_id)
    lines = ["\t".join(REPORT_COLUMNS)]
    for i in order:
        r = reports[i]
        small = "NA" if r.small_iou is None else f"{r.small_iou:.6f}"
        hung = "NA" if hungarian is None else f"{hungarian[i]:.6f}"
        lines.append(f"{r.shape_id}\t{r.avg_iou:.6f}\t{small}\t{r.pred_parts}\t{r.gt_parts}\t{hung}")
    summary = summarize(reports)
    small = "NA" if summary["small_iou"] is None else f"{summary['small_iou']:.6f}"
    lines.append(f"#summary\t{summary['avg_iou']:.6f}\t{small}\t{summary['pred_parts']:.2f}\t{summary['gt_parts']:.2f}\t"
                 + ("NA" if hungarian is None else f"{float(np.mean(hungarian)):.6f}"))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return summary


def summarize(reports: Sequence[IouReport]) -> dict:
    if not reports:
        raise EvalError("no reports to summarize")
    smalls = [r.small_iou for r in reports if r.small_iou is not None]
    return {
        "avg_iou": float(np.mean([r.avg_iou for r in reports])),
        "small_iou": float(np.mean(smalls)) if smalls else None,
        "pred_parts": float(np.mean([r.pred_parts for r in reports])),
        "gt_parts": float(np.mean([r.gt_parts for r in reports])),
    }
