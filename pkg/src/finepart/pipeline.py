"""Glue between the stages: block segmentation of whole shapes, graph building and merging."""
from __future__ import annotations

import hashlib
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mergenet as M
from . import priornet as P
from .config import PipelineConfig
from .evaluation import SegmentationResult, avg_iou, hungarian_iou, write_report
from .geometry import PointCloud, adjacency_epsilon, cell_local, make_blocks
from .synthdata import DatasetConfig, ManifestEntry, load_shape, make_dataset, read_manifest

log = logging.getLogger(__name__)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def training_blocks(cloud: PointCloud, resolution: int, size: int, seed: int) -> list[P.TrainBlock]:
    if cloud.labels is None:
        raise ValueError("training blocks need labels")
    return [P.TrainBlock(cell_local(b.sample.points, b.cell, resolution), b.sample.labels)
            for b in make_blocks(cloud, resolution, size, seed)]


def segment_blocks(cloud: PointCloud, prior: P.PriorNet, resolution: int, size: int, seed: int,
                   margin: float = P.MARGIN, threads: int = 1) -> list[M.BlockSegmentation]:
    """Run the frozen PriorNet on every block; output order follows the sorted cells whatever ``threads`` is."""
    blocks = make_blocks(cloud, resolution, size, seed)

    def run(b):
        seg, feats, r = P.segment_block_points(cell_local(b.sample.points, b.cell, resolution), prior, margin)
        return M.lift_to_members(b.cell, b.member_indices, cloud.points[b.member_indices],
                                 b.sample.points, seg, feats, r)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, blocks))
    return [run(b) for b in blocks]


def shape_graph(cloud: PointCloud, segs: Sequence[M.BlockSegmentation], epsilon: float | None = None,
                epsilon_factor: float = 2.0) -> M.SegmentGraph:
    eps = adjacency_epsilon(cloud.points, epsilon_factor) if epsilon is None else epsilon
    return M.build_segment_graph(segs, cloud.points, eps)


@dataclass
class ShapeSegmentation:
    parts: np.ndarray
    graph: M.SegmentGraph
    rank: int


def merge_shape(cloud: PointCloud, segs: Sequence[M.BlockSegmentation], merge: M.MergeNet,
                margin: float = P.MARGIN, epsilon: float | None = None, epsilon_factor: float = 2.0,
                split: bool = False, min_part_fraction: float = 0.0) -> ShapeSegmentation:
    graph = shape_graph(cloud, segs, epsilon, epsilon_factor)
    parts, r = M.merge_graph(graph, merge, len(cloud.points), margin, split, min_part_fraction)
    return ShapeSegmentation(parts, graph, r)


def blocks_only_parts(cloud: PointCloud, segs: Sequence[M.BlockSegmentation]) -> np.ndarray:
    """Every block segment as its own part (the no-merge baseline)."""
    out = np.empty(len(cloud.points), dtype=np.int64)
    k = 0
    for b in sorted(segs, key=lambda b: b.cell):
        out[b.member_indices] = b.member_segments + k
        k += int(b.member_segments.max()) + 1
    return out


# ---------------------------------------------------------------- block segmentation files

def save_block_segmentation(path, segs: Sequence[M.BlockSegmentation], prior_digest: str) -> None:
    """``.npz`` with one entry group per block, in cell order, plus the PriorNet checkpoint digest."""
    arrays: dict[str, np.ndarray] = {"prior_digest": np.array(prior_digest),
                                     "cells": np.array([b.cell for b in segs], dtype=np.int64).reshape(-1, 3),
                                     "ranks": np.array([b.rank for b in segs], dtype=np.int64)}
    for k, b in enumerate(segs):
        arrays[f"b{k}_members"] = b.member_indices
        arrays[f"b{k}_member_segments"] = b.member_segments
        arrays[f"b{k}_sample_segments"] = b.sample_segments
        arrays[f"b{k}_sample_features"] = b.sample_features
    np.savez(path, **arrays)


def load_block_segmentation(path, prior_digest: str | None = None) -> list[M.BlockSegmentation] | None:
    """Cached segmentation, or ``None`` when it was produced by a different PriorNet."""
    with np.load(path) as z:
        if prior_digest is not None and str(z["prior_digest"]) != prior_digest:
            return None
        out = []
        for k, cell in enumerate(z["cells"]):
            out.append(M.BlockSegmentation(tuple(int(c) for c in cell), z[f"b{k}_members"], z[f"b{k}_member_segments"],
                                           z[f"b{k}_sample_segments"], z[f"b{k}_sample_features"], int(z["ranks"][k])))
    return out


def write_graph(path, graph: M.SegmentGraph) -> None:
    """Readable dump: one ``node`` line per segment, then one ``edge`` line per adjacency."""
    lines = ["#node\tid\tcell\tblock_segment\tsize\tlo\thi"]
    for s in graph.segments:
        lo = ",".join(f"{v:.6f}" for v in s.aabb.lo)
        hi = ",".join(f"{v:.6f}" for v in s.aabb.hi)
        lines.append(f"node\t{s.id}\t{','.join(map(str, s.cell))}\t{s.block_segment}\t{len(s.members)}\t{lo}\t{hi}")
    lines.append("#edge\tu\tv")
    lines.extend(f"edge\t{u}\t{v}" for u, v in graph.edges.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- stages driven by a PipelineConfig

class StageError(RuntimeError):
    """A stage was asked to run before its inputs exist."""


def shape_id(entry_or_path) -> str:
    path = entry_or_path.path if hasattr(entry_or_path, "path") else entry_or_path
    return Path(path).stem


def block_seed(seed: int, sid: str) -> int:
    return (int(seed) << 32) | zlib.crc32(sid.encode())


@dataclass
class Layout:
    """Where each stage reads and writes, relative to the run directory."""

    out: Path
    data_root: Path
    variant: str = ""  # suffix for merge-stage outputs, so several merge settings can share one PriorNet

    @classmethod
    def of(cls, cfg: PipelineConfig, variant: str = "") -> "Layout":
        return cls(Path(cfg.out), Path(cfg.data_root), variant)

    manifest = property(lambda self: self.data_root / "manifest.tsv")
    prior = property(lambda self: self.out / "prior.ckpt")
    prior_log = property(lambda self: self.out / "prior_log.tsv")
    blocks_dir = property(lambda self: self.out / "blocks")
    merge_dir = property(lambda self: self.out / f"merge{self.variant}")
    parts_dir = property(lambda self: self.out / f"parts{self.variant}")
    graphs_dir = property(lambda self: self.out / f"graphs{self.variant}")
    report = property(lambda self: self.out / f"report{self.variant}.tsv")

    def merge_ckpt(self, family: str | None) -> Path:
        return self.merge_dir / f"{family or 'pooled'}.ckpt"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def gen_data(cfg: PipelineConfig) -> list[ManifestEntry]:
    return make_dataset(DatasetConfig(Path(cfg.data_root), cfg.families, cfg.shapes_per_family,
                                      cfg.points_total, cfg.seed, cfg.test_fraction))


def manifest_entries(cfg: PipelineConfig, split: str | None = None) -> list[ManifestEntry]:
    entries = read_manifest(_require(Layout.of(cfg).manifest, "dataset manifest (run gen-data)"))
    return [e for e in entries if split is None or e.split == split]


def train_prior(cfg: PipelineConfig) -> tuple[P.PriorNet, list]:
    lay = Layout.of(cfg)
    blocks: list[P.TrainBlock] = []
    for e in manifest_entries(cfg, "train"):
        cloud = load_shape(lay.data_root, e)
        blocks.extend(training_blocks(cloud, cfg.resolution, cfg.block_size, block_seed(cfg.seed, shape_id(e))))
    tcfg = P.PriorTrainConfig(per_count=cfg.per_count, epochs=cfg.prior_epochs, batch_size=cfg.prior_batch_size,
                              lr=cfg.prior_lr, margin=cfg.margin, r_max=cfg.r_max, seed=cfg.seed,
                              use_lowrank=cfg.use_lowrank, log_path=None)
    lay.out.mkdir(parents=True, exist_ok=True)
    tcfg.log_path = lay.prior_log
    net = P.PriorNet(cfg.seed, cfg.r_max, cfg.block_size)
    net, history = P.train_priornet(blocks, tcfg, net)
    net.save(lay.prior)
    return net, history


def load_prior(cfg: PipelineConfig) -> tuple[P.PriorNet, str]:
    path = _require(Layout.of(cfg).prior, "PriorNet checkpoint (run train-prior)")
    return P.PriorNet.load(path, cfg.seed, cfg.r_max, cfg.block_size), file_digest(path)


def shape_blocks(cfg: PipelineConfig, cloud: PointCloud, sid: str, prior: P.PriorNet, digest: str,
                 use_cache: bool = True) -> list[M.BlockSegmentation]:
    """Block segmentation of one shape, reusing ``blocks/<id>.npz`` when it came from the same PriorNet."""
    lay = Layout.of(cfg)
    cached = lay.blocks_dir / f"{sid}.npz"
    if use_cache and cached.exists():
        segs = load_block_segmentation(cached, digest)
        if segs is not None:
            return segs
    segs = segment_blocks(cloud, prior, cfg.resolution, cfg.block_size, block_seed(cfg.seed, sid), cfg.margin, cfg.threads)
    lay.blocks_dir.mkdir(parents=True, exist_ok=True)
    save_block_segmentation(cached, segs, digest)
    return segs


def segment_blocks_split(cfg: PipelineConfig, split: str | None = None) -> int:
    prior, digest = load_prior(cfg)
    lay = Layout.of(cfg)
    entries = manifest_entries(cfg, split)
    for e in entries:
        shape_blocks(cfg, load_shape(lay.data_root, e), shape_id(e), prior, digest)
    return len(entries)


def train_merge(cfg: PipelineConfig, variant: str = "") -> dict[str, list]:
    """One MergeNet per family (or a single pooled one) on the training split, PriorNet frozen."""
    prior, digest = load_prior(cfg)
    lay = Layout.of(cfg, variant)
    groups: dict[str | None, list[M.TrainGraph]] = {}
    for e in manifest_entries(cfg, "train"):
        cloud = load_shape(lay.data_root, e)
        segs = shape_blocks(cfg, cloud, shape_id(e), prior, digest)
        graph = shape_graph(cloud, segs, cfg.epsilon, cfg.epsilon_factor)
        groups.setdefault(e.family if cfg.per_family else None, []).append(M.make_train_graph(graph, cloud.labels, shape_id(e)))
    wanted = list(cfg.families) if cfg.per_family else [None]
    missing = [f for f in wanted if f not in groups]
    if missing:
        raise StageError(f"no training shapes for families {missing}")
    lay.merge_dir.mkdir(parents=True, exist_ok=True)
    histories = {}
    for fam in wanted:
        mcfg = M.MergeTrainConfig(epochs=cfg.merge_epochs, batch_size=cfg.merge_batch_size, lr=cfg.merge_lr,
                                  margin=cfg.margin, layers=cfg.layers, r_max=cfg.r_max_merge, seed=cfg.seed,
                                  log_path=lay.merge_dir / f"{fam or 'pooled'}_log.tsv")
        net, hist = M.train_mergenet(groups[fam], mcfg)
        net.save(lay.merge_ckpt(fam))
        histories[fam or "pooled"] = hist
    return histories


def load_merge(cfg: PipelineConfig, family: str | None, variant: str = "") -> M.MergeNet:
    key = family if cfg.per_family else None
    if cfg.per_family and not family:
        raise StageError("per-family merging needs a family for this shape (pass --family)")
    net = M.MergeNet.load(_require(Layout.of(cfg, variant).merge_ckpt(key), "MergeNet checkpoint (run train-merge)"))
    if net.layers != cfg.layers:
        raise StageError(f"MergeNet checkpoint has {net.layers} layers, config asks for {cfg.layers}")
    return net


def segment_cloud(cfg: PipelineConfig, cloud: PointCloud, sid: str, family: str | None,
                  prior=None, digest=None, merge=None, use_cache: bool = True) -> ShapeSegmentation:
    if prior is None:
        prior, digest = load_prior(cfg)
    merge = merge or load_merge(cfg, family)
    segs = shape_blocks(cfg, cloud, sid, prior, digest, use_cache)
    return merge_shape(cloud, segs, merge, cfg.margin, cfg.epsilon, cfg.epsilon_factor,
                       cfg.split_parts, cfg.min_part_fraction)


def segment_split(cfg: PipelineConfig, split: str = "test", variant: str = "") -> list[Path]:
    """Write ``parts/<id>.parts`` and ``graphs/<id>.tsv`` for every shape of ``split``."""
    lay = Layout.of(cfg, variant)
    prior, digest = load_prior(cfg)
    nets: dict[str | None, M.MergeNet] = {}
    lay.parts_dir.mkdir(parents=True, exist_ok=True)
    lay.graphs_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for e in manifest_entries(cfg, split):
        key = e.family if cfg.per_family else None
        if key not in nets:
            nets[key] = load_merge(cfg, e.family, variant)
        sid = shape_id(e)
        result = segment_cloud(cfg, load_shape(lay.data_root, e), sid, e.family, prior, digest, nets[key])
        M.write_parts(lay.parts_dir / f"{sid}.parts", result.parts)
        write_graph(lay.graphs_dir / f"{sid}.tsv", result.graph)
        written.append(lay.parts_dir / f"{sid}.parts")
    return written


def evaluate_split(cfg: PipelineConfig, split: str = "test", report_path=None, variant: str = "") -> dict:
    lay = Layout.of(cfg, variant)
    reports, hung = [], []
    for e in manifest_entries(cfg, split):
        sid = shape_id(e)
        cloud = load_shape(lay.data_root, e)
        pred = M.read_parts(_require(lay.parts_dir / f"{sid}.parts", f"part file for {sid} (run segment)"))
        res = SegmentationResult(pred, cloud.labels, sid, cloud.points)
        reports.append(avg_iou(res))
        hung.append(hungarian_iou(res))
    if not reports:
        raise StageError(f"no shapes in split {split!r}")
    return write_report(report_path or lay.report, reports, hung)
