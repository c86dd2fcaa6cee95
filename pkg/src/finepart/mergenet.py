"""Merge block segments into whole-shape parts.

Every block segment becomes a graph node whose initial state is the max-pool
of its points' PriorNet features; nodes are linked when their (slightly
inflated) bounding boxes touch. A few rounds of mean-aggregation message
passing refine the node states, and the same similarity and low-rank
machinery used inside blocks then groups nodes into parts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import priornet as P
from . import tensor as T
from .geometry import Aabb
from .kernels import aabb_overlap_pairs
from .nn import MLP, Linear, load_into
from .tensor import Adam, Parameter, Tensor

log = logging.getLogger(__name__)

R_MAX_MERGE = 100
LAYERS = 3
HIDDEN = P.FEATURE_DIM


class MergeError(ValueError):
    pass


# ---------------------------------------------------------------- graph

@dataclass
class BlockSegmentation:
    """PriorNet output for one block, lifted to every cloud point in the cell.

    ``member_indices`` are cloud indices of all points in the cell and
    ``member_segments`` their segment ids. ``sample_segments`` and
    ``sample_features`` describe the resampled points the network actually saw.
    """

    cell: tuple[int, int, int]
    member_indices: np.ndarray
    member_segments: np.ndarray
    sample_segments: np.ndarray
    sample_features: np.ndarray
    rank: int = 0


def lift_to_members(cell, member_indices, member_points, sample_points, sample_segments, sample_features, rank=0) -> BlockSegmentation:
    """Give every cell point the segment of its nearest resampled point."""
    _, nearest = cKDTree(sample_points).query(member_points, k=1)
    return BlockSegmentation(tuple(int(c) for c in cell), np.asarray(member_indices, dtype=np.int64),
                             np.asarray(sample_segments, dtype=np.int64)[nearest],
                             np.asarray(sample_segments, dtype=np.int64), np.asarray(sample_features), rank)


@dataclass
class Segment:
    id: int
    cell: tuple[int, int, int]
    block_segment: int
    members: np.ndarray
    aabb: Aabb
    x: np.ndarray


@dataclass
class SegmentGraph:
    segments: list[Segment]
    edges: np.ndarray  # (m, 2) with i < j, sorted
    neighbors: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.neighbors:
            nb: list[list[int]] = [[] for _ in self.segments]
            for i, j in self.edges:
                nb[i].append(int(j))
                nb[j].append(int(i))
            self.neighbors = [np.array(sorted(v), dtype=np.int64) for v in nb]

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.x for s in self.segments])

    def point_count(self) -> int:
        return sum(len(s.members) for s in self.segments)


def build_segment_graph(blocks: Sequence[BlockSegmentation], points: np.ndarray, epsilon: float) -> SegmentGraph:
    """One node per (block, segment id), ordered by cell then segment id; edges from AABB contact."""
    if not blocks:
        raise MergeError("empty segmentation: no blocks")
    pts = np.asarray(points, dtype=np.float64)
    segments: list[Segment] = []
    for b in sorted(blocks, key=lambda b: b.cell):
        for sid in np.unique(b.member_segments):
            members = np.sort(b.member_indices[b.member_segments == sid])
            pooled = b.sample_features[b.sample_segments == sid]
            if len(pooled) == 0:
                # every member came from a resampled point with this id, so this cannot happen
                raise MergeError(f"segment {sid} of cell {b.cell} has no sampled points")
            sel = pts[members]
            segments.append(Segment(len(segments), b.cell, int(sid), members,
                                    Aabb(sel.min(axis=0), sel.max(axis=0)), pooled.max(axis=0)))
    if not segments:
        raise MergeError("empty segmentation: no segments")
    lo = np.stack([s.aabb.lo for s in segments])
    hi = np.stack([s.aabb.hi for s in segments])
    edges = aabb_overlap_pairs(lo, hi, epsilon)
    return SegmentGraph(segments, np.asarray(edges, dtype=np.int64).reshape(-1, 2))


# ---------------------------------------------------------------- model

class MergeNet:
    """Message passing (``layers`` rounds) plus a low-rank head with ``r_max`` columns."""

    def __init__(self, seed: int = 0, layers: int = LAYERS, r_max: int = R_MAX_MERGE, prefix: str = "merge"):
        if layers < 0:
            raise MergeError("layer count must be nonnegative")
        rng = np.random.default_rng(seed)
        self.layers = layers
        self.r_max = r_max
        self.msg = [Linear(f"{prefix}.msg{l}", HIDDEN, HIDDEN, rng) for l in range(layers)]
        self.upd = [Linear(f"{prefix}.upd{l}", 2 * HIDDEN, HIDDEN, rng) for l in range(layers)]
        self.head = MLP(f"{prefix}.head", (P.HEAD_WIDTH,) + P.HEAD_DIMS, rng)
        self.proj = Linear(f"{prefix}.proj", P.HEAD_DIMS[-1], r_max, rng, gain=1.0)

    def propagation_parameters(self) -> list[Parameter]:
        return [p for l in range(self.layers) for p in self.msg[l].parameters() + self.upd[l].parameters()]

    def parameters(self) -> list[Parameter]:
        return self.propagation_parameters() + self.head.parameters() + self.proj.parameters()

    def tag(self) -> str:
        return f"mergenet/L{self.layers}/R{self.r_max}"

    def save(self, path) -> None:
        T.save_checkpoint(path, self.parameters(), self.tag())

    @classmethod
    def load(cls, path) -> "MergeNet":
        tag, arrays = T.load_checkpoint(path)
        parts = tag.split("/")
        if len(parts) != 3 or parts[0] != "mergenet":
            raise MergeError(f"{path}: checkpoint tag {tag!r} is not a MergeNet")
        net = cls(0, int(parts[1][1:]), int(parts[2][1:]))
        load_into(net.parameters(), arrays)
        return net


def propagate(graph: SegmentGraph, net: MergeNet, x: Tensor | None = None) -> Tensor:
    """``h <- upd([h, mean_{u in N(v)} msg(h_u)])`` for each layer; isolated nodes receive zeros.

    The last update is linear so the final states are not confined to the
    positive orthant.
    """
    h = Tensor(graph.features) if x is None else x
    for l in range(net.layers):
        a = T.neighbor_mean(T.relu(net.msg[l](h)), graph.neighbors)
        h = net.upd[l](T.concat_cols([h, a]))
        if l < net.layers - 1:
            h = T.relu(h)
    return h


def merge_head(s_pred: Tensor, net: MergeNet, order: np.ndarray) -> Tensor:
    """Low-rank head on segment-similarity rows: FPS-ordered columns, cut or padded to the head width."""
    x = T.take_cols(s_pred, np.asarray(order)[: P.HEAD_WIDTH])
    x = T.pad_cols(x, P.HEAD_WIDTH)
    return T.softmax_rows(net.proj(net.head(x)))


@dataclass
class MergeOutput:
    h: Tensor
    dist: Tensor
    s_pred: Tensor
    m: Tensor


def forward_graph(graph: SegmentGraph, net: MergeNet, margin: float = P.MARGIN) -> MergeOutput:
    if len(graph) == 0:
        raise MergeError("graph has no nodes")
    h = propagate(graph, net)
    dist = P.feature_distances(h)
    s_pred = P.predict_similarity(h, margin, dist)
    m = merge_head(s_pred, net, P.head_column_order(dist.data))
    return MergeOutput(h, dist, s_pred, m)


# ---------------------------------------------------------------- supervision and losses

def segment_labels(graph: SegmentGraph, gt: np.ndarray) -> np.ndarray:
    """Majority ground-truth part of each segment; ties go to the smaller part id."""
    gt = np.asarray(gt, dtype=np.int64)
    return np.array([int(np.argmax(np.bincount(gt[s.members]))) for s in graph.segments], dtype=np.int64)


def gt_segment_similarity(graph: SegmentGraph, gt: np.ndarray) -> np.ndarray:
    return P.gt_similarity(segment_labels(graph, gt))


def merge_loss(out: MergeOutput, seg_labels: np.ndarray, margin: float = P.MARGIN) -> tuple[Tensor, Tensor]:
    """Segment-level ``(L_sim, L_low-rank)``; the rank is the number of distinct segment labels."""
    r = len(np.unique(seg_labels))
    if r > out.m.shape[1]:
        raise MergeError(f"{r} distinct parts exceed the head's {out.m.shape[1]} columns")
    l_sim = P.similarity_loss(out.h, seg_labels, margin, out.dist)
    l_low = P.lowrank_loss(out.m, r, P.gt_similarity(seg_labels))
    return l_sim, l_low


def select_merge_rank(m: np.ndarray, s_pred: np.ndarray) -> tuple[int, np.ndarray]:
    """Rank search over ``1..min(columns, nodes)``."""
    return P.select_rank(m, s_pred, min(m.shape[1], m.shape[0]))


def assign_parts(graph: SegmentGraph, m_r: np.ndarray, n_points: int) -> np.ndarray:
    """Per-point part ids from per-segment argmax columns (compacted to 0..k-1)."""
    seg_part = P.segment_block(m_r)
    out = np.full(n_points, -1, dtype=np.int64)
    for s, part in zip(graph.segments, seg_part):
        out[s.members] = part
    if (out < 0).any():
        raise MergeError("segments do not cover every point")
    return out


def split_disconnected(graph: SegmentGraph, seg_part: np.ndarray) -> np.ndarray:
    """Relabel so every part is a connected set of segments in the graph.

    Components are numbered in order of their smallest segment id.
    """
    seg_part = np.asarray(seg_part, dtype=np.int64)
    n = len(graph)
    keep = graph.edges[seg_part[graph.edges[:, 0]] == seg_part[graph.edges[:, 1]]] if len(graph.edges) else graph.edges
    adj = coo_matrix((np.ones(len(keep)), (keep[:, 0], keep[:, 1])), shape=(n, n)) if len(keep) else coo_matrix((n, n))
    _, comp = connected_components(adj, directed=False)
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[comp]


def absorb_small_parts(graph: SegmentGraph, seg_part: np.ndarray, min_fraction: float) -> np.ndarray:
    """Fold parts holding fewer than ``min_fraction`` of the points into a neighbouring part.

    The smallest offending part goes first, into the adjacent part it shares
    the most graph edges with (then the larger part, then the smaller id).
    Parts with no neighbour of another part are left alone. Ids are compacted
    in order of first segment afterwards.
    """
    seg_part = np.array(seg_part, dtype=np.int64)
    if min_fraction <= 0 or len(graph.edges) == 0:
        return seg_part
    sizes = np.array([len(s.members) for s in graph.segments], dtype=np.int64)
    limit = min_fraction * sizes.sum()
    stuck: set[int] = set()
    while True:
        part_size = np.bincount(seg_part, weights=sizes)
        small = [p for p in np.argsort(part_size, kind="stable")
                 if 0 < part_size[p] < limit and p not in stuck]
        if not small:
            break
        p = int(small[0])
        a, b = seg_part[graph.edges[:, 0]], seg_part[graph.edges[:, 1]]
        other = np.concatenate([b[(a == p) & (b != p)], a[(b == p) & (a != p)]])
        if len(other) == 0:
            stuck.add(p)
            continue
        links = np.bincount(other, minlength=len(part_size))
        cands = np.nonzero(links)[0]
        q = min(cands, key=lambda c: (-links[c], -part_size[c], c))
        seg_part[seg_part == p] = q
    _, first, inverse = np.unique(seg_part, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse]


def merge_graph(graph: SegmentGraph, net: MergeNet, n_points: int, margin: float = P.MARGIN,
                split: bool = False, min_part_fraction: float = 0.0) -> tuple[np.ndarray, int]:
    """Inference: ``(per-point part ids, selected rank)``.

    ``split`` breaks every predicted part into its connected pieces on the
    segment graph; ``min_part_fraction`` then folds tiny parts into a
    neighbour. Both are off by default.
    """
    if len(graph) == 1:
        return assign_parts(graph, np.ones((1, 1)), n_points), 1
    out = forward_graph(graph, net, margin)
    r, mr = select_merge_rank(out.m.data, out.s_pred.data)
    if split or min_part_fraction > 0:
        seg_part = P.segment_block(mr)
        if split:
            seg_part = split_disconnected(graph, seg_part)
        seg_part = absorb_small_parts(graph, seg_part, min_part_fraction)
        mr = np.eye(int(seg_part.max()) + 1)[seg_part]
    return assign_parts(graph, mr, n_points), r


# ---------------------------------------------------------------- training

@dataclass
class TrainGraph:
    graph: SegmentGraph
    labels: np.ndarray  # per-segment majority labels
    shape_id: str = ""


def make_train_graph(graph: SegmentGraph, gt: np.ndarray, shape_id: str = "") -> TrainGraph:
    return TrainGraph(graph, segment_labels(graph, gt), shape_id)


@dataclass
class MergeTrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    margin: float = P.MARGIN
    layers: int = LAYERS
    r_max: int = R_MAX_MERGE
    seed: int = 0
    log_path: Path | None = None


def train_mergenet(graphs: Sequence[TrainGraph], cfg: MergeTrainConfig, net: MergeNet | None = None) -> tuple[MergeNet, list[tuple[int, float, float]]]:
    """Minimise segment-level ``L_sim + L_low-rank`` over whole-shape graphs, ``batch_size`` shapes per step."""
    usable = [g for g in graphs if len(g.graph) > 1]
    if not usable:
        raise MergeError("no training shapes with more than one segment")
    net = net or MergeNet(cfg.seed, cfg.layers, cfg.r_max)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    history = []
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(usable))
            sums = np.zeros(2)
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                for i in batch:
                    tg = usable[i]
                    out = forward_graph(tg.graph, net, cfg.margin)
                    l_sim, l_low = merge_loss(out, tg.labels, cfg.margin)
                    # per-shape losses are normalised by node count squared so large graphs do not dominate
                    scale = 1.0 / (len(batch) * len(tg.graph) ** 2)
                    T.backward(T.mul(T.add(l_sim, l_low), scale))
                    sums += (l_sim.item() / len(tg.graph) ** 2, l_low.item() / len(tg.graph) ** 2)
                _fill_missing_grads(net.parameters())
                opt.step()
            mean = sums / len(usable)
            history.append((epoch, float(mean[0]), float(mean[1])))
            log.info("merge epoch %d  L_sim %.4g  L_lowrank %.4g", epoch, mean[0], mean[1])
            if log_fh:
                log_fh.write(f"{epoch}\t{float(mean[0])!r}\t{float(mean[1])!r}\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return net, history


def _fill_missing_grads(params: Sequence[Parameter]) -> None:
    # a graph without edges never touches the message weights
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- output file

def write_parts(path, parts: np.ndarray) -> None:
    parts = np.asarray(parts, dtype=np.int64)
    lines = [f"{i}\t{p}" for i, p in enumerate(parts.tolist())]
    lines.append(f"#parts={len(np.unique(parts))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_parts(path) -> np.ndarray:
    ids: list[int] = []
    declared = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("#parts="):
            declared = int(line[len("#parts="):])
            continue
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or int(fields[0]) != len(ids):
            raise MergeError(f"{path}:{lineno}: expected '<point_index>\\t<part_id>' in order")
        ids.append(int(fields[1]))
    parts = np.array(ids, dtype=np.int64)
    if declared is not None and declared != len(np.unique(parts)):
        raise MergeError(f"{path}: header says {declared} parts, file has {len(np.unique(parts))}")
    return parts
