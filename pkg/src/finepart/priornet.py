"""Per-block segmentation network.

A block of D points goes through a PointNet-style feature net. Pairwise feature
distances give a predicted similarity matrix; each of its rows is mapped by the
low-rank head to a soft assignment over at most ``r_max`` part columns.
Training combines the margin similarity loss with the low-rank reconstruction
loss; at test time the column count is chosen by reconstruction error.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Linear, load_into
from .tensor import Adam, Parameter, Tensor

log = logging.getLogger(__name__)

FEATURE_DIM = 128
HEAD_DIMS = (512, 256, 128)
HEAD_WIDTH = 512
R_MAX = 5
MARGIN = 100.0


class PriorNetError(ValueError):
    pass


# ---------------------------------------------------------------- model

class PriorNet:
    """Feature net plus low-rank head.

    ``point``   : per-point MLP 3 -> 64 -> 128
    ``context`` : [point feature, max-pooled block feature] 256 -> 128 -> 128
    ``head``    : similarity row 512 -> 512 -> 256 -> 128, then a projection to ``r_max``
    """

    def __init__(self, seed: int = 0, r_max: int = R_MAX, block_size: int = 512, prefix: str = "prior",
                 feature_gain: float = MARGIN / 10):
        rng = np.random.default_rng(seed)
        self.r_max = r_max
        # fixed output gain so initial feature distances sit at a tenth of the margin
        self.feature_gain = feature_gain
        self.block_size = block_size
        self.point = MLP(f"{prefix}.point", (3, 64, FEATURE_DIM), rng)
        self.context = MLP(f"{prefix}.context", (2 * FEATURE_DIM, FEATURE_DIM, FEATURE_DIM), rng, final_relu=False)
        self.head = MLP(f"{prefix}.head", (HEAD_WIDTH,) + HEAD_DIMS, rng)
        self.proj = Linear(f"{prefix}.proj", HEAD_DIMS[-1], r_max, rng, gain=1.0)

    def feature_parameters(self) -> list[Parameter]:
        return self.point.parameters() + self.context.parameters()

    def head_parameters(self) -> list[Parameter]:
        return self.head.parameters() + self.proj.parameters()

    def parameters(self) -> list[Parameter]:
        return self.feature_parameters() + self.head_parameters()

    def save(self, path, tag: str = "priornet") -> None:
        T.save_checkpoint(path, self.parameters(), tag)

    @classmethod
    def load(cls, path, seed: int = 0, r_max: int = R_MAX, block_size: int = 512) -> "PriorNet":
        net = cls(seed, r_max, block_size)
        tag, arrays = T.load_checkpoint(path)
        if tag != "priornet":
            raise PriorNetError(f"{path}: checkpoint tag {tag!r} is not a PriorNet")
        load_into(net.parameters(), arrays)
        return net


def extract_point_features(local_points: np.ndarray, net: PriorNet) -> Tensor:
    """Per-point features (N x 128) from cell-local coordinates of exactly ``block_size`` points."""
    pts = np.asarray(local_points, dtype=np.float64)
    if pts.shape != (net.block_size, 3):
        raise PriorNetError(f"block must hold {net.block_size} points, got {pts.shape[0]}")
    h = net.point(Tensor(pts))
    ctx = T.repeat_rows(T.max_pool_rows(h), pts.shape[0])
    return T.mul(net.context(T.concat_cols([h, ctx])), net.feature_gain)


# ---------------------------------------------------------------- similarity

def gt_similarity(labels) -> np.ndarray:
    lab = np.asarray(labels)
    return (lab[:, None] == lab[None, :]).astype(np.float64)


def feature_distances(features: Tensor) -> Tensor:
    return T.sqrt(T.sq_euclid_rowpairs(features))


def similarity_loss(features: Tensor, labels, margin: float = MARGIN, dist: Tensor | None = None) -> Tensor:
    """Sum over all ordered pairs: distance for same-part pairs, hinge ``max(0, K - d)`` otherwise."""
    d = feature_distances(features) if dist is None else dist
    lab = np.asarray(labels)
    return T.margin_pair_loss(d, lab[:, None] == lab[None, :], margin)


def predict_similarity(features: Tensor, margin: float = MARGIN, dist: Tensor | None = None) -> Tensor:
    """``clamp(1 - d / K, 0, 1)``: 1 for identical features, 0 at or beyond the margin."""
    d = feature_distances(features) if dist is None else dist
    return T.margin_similarity(d, margin)


def head_column_order(dist: np.ndarray) -> np.ndarray:
    """Order similarity-row columns by farthest-point traversal in feature space.

    The first entries are one representative per well-separated cluster, so a
    row's membership of the k-th cluster always lands in input column k.
    Starts from the point with the largest total distance (lowest index on ties).
    """
    from .kernels import fps_from_distances

    n = dist.shape[0]
    start = int(np.argmax(dist.sum(axis=1)))
    return fps_from_distances(dist, n, start)


def lowrank_head(s_pred: Tensor, net: PriorNet | "HeadLike", order: np.ndarray | None = None) -> Tensor:
    """Map every similarity row to a softmax assignment over ``r_max`` columns."""
    n = s_pred.shape[0]
    if n != HEAD_WIDTH and isinstance(net, PriorNet):
        raise PriorNetError(f"head expects {HEAD_WIDTH}-wide similarity rows, got {n}")
    x = s_pred if order is None else T.take_cols(s_pred, order)
    x = T.pad_cols(x, HEAD_WIDTH)
    return T.softmax_rows(net.proj(net.head(x)))


class HeadLike:  # typing aid: anything with ``head`` and ``proj`` layers
    head: MLP
    proj: Linear


def lowrank_loss(m: Tensor, r: int, s_gt: np.ndarray) -> Tensor:
    """``|| M_r M_r^T - S_gt ||^2`` with M_r the first ``r`` columns, rows renormalised."""
    if not 1 <= r <= m.shape[1]:
        raise PriorNetError(f"rank {r} outside 1..{m.shape[1]}")
    mr = T.row_normalize(T.take_cols(m, np.arange(r)))
    diff = T.sub(T.matmul(mr, T.transpose(mr)), np.asarray(s_gt, dtype=np.float64))
    return T.sum(T.square(diff))


def truncate_normalize(m: np.ndarray, r: int) -> np.ndarray:
    mr = np.asarray(m, dtype=np.float64)[:, :r]
    s = mr.sum(axis=1, keepdims=True)
    return np.divide(mr, s, out=np.full_like(mr, 1.0 / r), where=s > 0)


def reconstruction_errors(m: np.ndarray, s_pred: np.ndarray, r_max: int | None = None) -> np.ndarray:
    r_max = m.shape[1] if r_max is None else min(r_max, m.shape[1])
    errs = np.empty(r_max)
    for r in range(1, r_max + 1):
        mr = truncate_normalize(m, r)
        diff = mr @ mr.T - s_pred
        errs[r - 1] = np.einsum("ij,ij->", diff, diff)
    return errs


def select_rank(m: np.ndarray, s_pred: np.ndarray, r_max: int | None = None) -> tuple[int, np.ndarray]:
    """Pick the truncation whose reconstruction best matches ``s_pred``; ties go to smaller r."""
    errs = reconstruction_errors(np.asarray(m), np.asarray(s_pred), r_max)
    best = 0
    for k in range(1, len(errs)):
        if errs[k] < errs[best] - 1e-9 * max(1.0, errs[best]):
            best = k
    r = best + 1
    return r, truncate_normalize(m, r)


def segment_block(m_r: np.ndarray) -> np.ndarray:
    """Hard assignment: argmax column (lowest index on ties), then compact ids to 0..k-1."""
    raw = np.argmax(np.asarray(m_r), axis=1)
    used = np.unique(raw)
    remap = np.full(int(raw.max()) + 1, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return remap[raw]


# ---------------------------------------------------------------- forward helpers

@dataclass
class BlockOutput:
    features: Tensor
    dist: Tensor
    s_pred: Tensor
    m: Tensor | None


def forward_block(local_points: np.ndarray, net: PriorNet, margin: float = MARGIN, with_head: bool = True) -> BlockOutput:
    feats = extract_point_features(local_points, net)
    dist = feature_distances(feats)
    s_pred = predict_similarity(feats, margin, dist)
    m = lowrank_head(s_pred, net, head_column_order(dist.data)) if with_head else None
    return BlockOutput(feats, dist, s_pred, m)


def segment_block_points(local_points: np.ndarray, net: PriorNet, margin: float = MARGIN) -> tuple[np.ndarray, np.ndarray, int]:
    """Inference for one block: ``(segment ids, point features, selected rank)``."""
    out = forward_block(local_points, net, margin)
    r, mr = select_rank(out.m.data, out.s_pred.data, net.r_max)
    return segment_block(mr), out.features.data, r


# ---------------------------------------------------------------- training

@dataclass
class TrainBlock:
    local_points: np.ndarray
    labels: np.ndarray

    @property
    def segment_count(self) -> int:
        return len(np.unique(self.labels))


@dataclass
class PriorTrainConfig:
    per_count: int = 400
    epochs: int = 100
    batch_size: int = 24
    lr: float = 1e-3
    margin: float = MARGIN
    r_max: int = R_MAX
    seed: int = 0
    use_lowrank: bool = True
    log_path: Path | None = None


def balanced_pool(blocks: Sequence[TrainBlock], per_count: int, r_max: int, seed: int) -> list[TrainBlock]:
    """Draw up to ``per_count`` blocks for each ground-truth segment count 1..r_max."""
    rng = np.random.default_rng([seed, 1])
    buckets: dict[int, list[int]] = {r: [] for r in range(1, r_max + 1)}
    for i, b in enumerate(blocks):
        c = b.segment_count
        if c in buckets:
            buckets[c].append(i)
    pool: list[TrainBlock] = []
    for r, idx in buckets.items():
        if not idx:
            log.warning("no training blocks with %d segments; continuing without them", r)
            continue
        if len(idx) < per_count:
            log.warning("only %d blocks with %d segments (wanted %d)", len(idx), r, per_count)
            take = idx
        else:
            take = sorted(rng.choice(idx, size=per_count, replace=False).tolist())
        pool.extend(blocks[i] for i in take)
    return pool


def block_losses(block: TrainBlock, net: PriorNet, cfg: PriorTrainConfig) -> tuple[Tensor, Tensor | None]:
    out = forward_block(block.local_points, net, cfg.margin, with_head=cfg.use_lowrank)
    l_sim = similarity_loss(out.features, block.labels, cfg.margin, out.dist)
    if not cfg.use_lowrank:
        return l_sim, None
    r = block.segment_count
    return l_sim, lowrank_loss(out.m, r, gt_similarity(block.labels))


def train_priornet(blocks: Sequence[TrainBlock], cfg: PriorTrainConfig, net: PriorNet | None = None) -> tuple[PriorNet, list[tuple[int, float, float]]]:
    """Minimise L_sim + L_low-rank over a count-balanced block pool with Adam.

    With ``use_lowrank`` off the head is left untouched (the ablation).
    Returns the net and the per-epoch ``(epoch, mean L_sim, mean L_low-rank)`` log.
    """
    net = net or PriorNet(cfg.seed, cfg.r_max)
    pool = balanced_pool(blocks, cfg.per_count, cfg.r_max, cfg.seed)
    if not pool:
        raise PriorNetError("no usable training blocks")
    params = net.parameters() if cfg.use_lowrank else net.feature_parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    history = []
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(pool))
            sums = np.zeros(2)
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                for i in batch:
                    l_sim, l_low = block_losses(pool[i], net, cfg)
                    total = l_sim if l_low is None else T.add(l_sim, l_low)
                    T.backward(T.mul(total, 1.0 / len(batch)))
                    sums += (l_sim.item(), 0.0 if l_low is None else l_low.item())
                opt.step()
            mean = sums / len(pool)
            history.append((epoch, float(mean[0]), float(mean[1])))
            log.info("prior epoch %d  L_sim %.4g  L_lowrank %.4g", epoch, mean[0], mean[1])
            if log_fh:
                log_fh.write(f"{epoch}\t{float(mean[0])!r}\t{float(mean[1])!r}\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return net, history
