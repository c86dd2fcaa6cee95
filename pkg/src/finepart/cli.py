"""Command-line driver for the two-stage pipeline.

Every failure ends with one line on stderr of the form
``error<TAB><kind><TAB><message>`` and exit status 2.
"""
from __future__ import annotations

import os

# one BLAS thread unless the caller says otherwise: keeps runs bit-reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import mergenet as M
from . import pipeline as PL
from .config import FIELD_NAMES, ConfigError, PipelineConfig, load_config, parse_value, write_config
from .evaluation import SegmentationResult, avg_iou, block_stats, hungarian_iou
from .geometry import PointCloud, normalize_cloud
from .synthdata import export_ply, load_shape, read_cloud

log = logging.getLogger("finepart")

COMMANDS = ("gen-data", "train-prior", "segment-blocks", "train-merge", "segment", "eval", "stats", "export-ply", "sweep")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file with sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads for block inference (default 1)")
    p.add_argument("--out", help="run directory for checkpoints and outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("config overrides")
    for name in FIELD_NAMES:
        if name in ("seed", "threads", "out"):
            continue
        group.add_argument("--" + name.replace("_", "-"), dest=f"cfg_{name}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finepart", description="Label-free fine-grained point cloud segmentation.")
    parser.add_argument("--version", action="version", version=f"finepart {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and manifest")
    _add_config_flags(p)

    p = sub.add_parser("train-prior", help="train the block network on the training split")
    _add_config_flags(p)

    p = sub.add_parser("segment-blocks", help="run the block network over a split and cache the results")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    _add_config_flags(p)

    p = sub.add_parser("train-merge", help="train the merge network(s) with the block network frozen")
    _add_config_flags(p)

    p = sub.add_parser("segment", help="segment one cloud file, or every shape of a split")
    p.add_argument("input", nargs="?", type=Path, help="point file (.xyz/.txt); omit to process --split")
    p.add_argument("--family", help="family whose merge network to use (per-family mode)")
    p.add_argument("--output", type=Path, help="part file to write (default: <out>/parts/<stem>.parts)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="average IoU of part files against ground truth")
    p.add_argument("--pred", type=Path, help="single part file")
    p.add_argument("--gt", type=Path, help="labeled point file matching --pred")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--report", type=Path, help="report path (default: <out>/report.tsv)")
    _add_config_flags(p)

    p = sub.add_parser("stats", help="segment-count-per-block histogram of the dataset")
    _add_config_flags(p)

    p = sub.add_parser("export-ply", help="colour a cloud by labels or a part file")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--parts", type=Path, help="part file to colour by (default: the cloud's own labels)")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="average IoU over resolutions and layer counts")
    p.add_argument("--resolutions", default="5,7,10")
    p.add_argument("--layer-values", default="0,1,2,3,4,5")
    p.add_argument("--train", action="store_true", help="train missing settings instead of marking them absent")
    p.add_argument("--table", type=Path, help="output table (default: <out>/sweep.tsv)")
    _add_config_flags(p)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    for name in FIELD_NAMES:
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            changes[name] = parse_value(name, raw)
    for name in ("seed", "threads", "out"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    return cfg.with_overrides(**changes) if changes else cfg


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args):
    entries = PL.gen_data(cfg)
    n_test = sum(e.split == "test" for e in entries)
    print(f"shapes\t{len(entries)}\ttrain\t{len(entries) - n_test}\ttest\t{n_test}")


def cmd_train_prior(cfg, args):
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_config(Path(cfg.out) / "config.ini", cfg)
    _, history = PL.train_prior(cfg)
    print(f"prior\t{PL.Layout.of(cfg).prior}\tL_sim\t{history[-1][1]:.6g}\tL_lowrank\t{history[-1][2]:.6g}")


def cmd_segment_blocks(cfg, args):
    n = PL.segment_blocks_split(cfg, None if args.split == "all" else args.split)
    print(f"segmented\t{n}\tshapes\t{PL.Layout.of(cfg).blocks_dir}")


def cmd_train_merge(cfg, args):
    histories = PL.train_merge(cfg)
    for name, hist in histories.items():
        print(f"merge\t{name}\tL_sim\t{hist[-1][1]:.6g}\tL_lowrank\t{hist[-1][2]:.6g}")


def cmd_segment(cfg, args):
    if args.input is None:
        paths = PL.segment_split(cfg, args.split)
        print(f"segmented\t{len(paths)}\tshapes\t{PL.Layout.of(cfg).parts_dir}")
        return
    raw = read_cloud(args.input)
    cloud = normalize_cloud(PointCloud(raw.points, raw.labels))
    sid = args.input.stem
    result = PL.segment_cloud(cfg, cloud, sid, args.family)
    out = args.output or PL.Layout.of(cfg).parts_dir / f"{sid}.parts"
    out.parent.mkdir(parents=True, exist_ok=True)
    M.write_parts(out, result.parts)
    print(f"parts\t{len(np.unique(result.parts))}\tpoints\t{len(result.parts)}\t{out}")


def cmd_eval(cfg, args):
    if args.pred is not None or args.gt is not None:
        if args.pred is None or args.gt is None:
            raise ConfigError("--pred and --gt go together")
        gt_cloud = read_cloud(args.gt)
        if gt_cloud.labels is None:
            raise ConfigError(f"{args.gt} has no label column")
        res = SegmentationResult(M.read_parts(args.pred), gt_cloud.labels, args.pred.stem, gt_cloud.points)
        rep = avg_iou(res)
        small = "NA" if rep.small_iou is None else f"{rep.small_iou:.4f}"
        print(f"average IoU {rep.avg_iou:.4f}\tsmall-part IoU {small}\tparts {rep.pred_parts}/{rep.gt_parts}"
              f"\thungarian (diagnostic) {hungarian_iou(res):.4f}")
        return
    summary = PL.evaluate_split(cfg, args.split, args.report)
    small = "NA" if summary["small_iou"] is None else f"{summary['small_iou']:.4f}"
    print(f"average IoU {summary['avg_iou']:.4f}\tsmall-part IoU {small}"
          f"\tparts {summary['pred_parts']:.2f}/{summary['gt_parts']:.2f}")


def cmd_stats(cfg, args):
    lay = PL.Layout.of(cfg)
    clouds = (load_shape(lay.data_root, e) for e in PL.manifest_entries(cfg))
    hist, frac = block_stats(clouds, cfg.resolution, cfg.r_max)
    print("segments\tblocks")
    for k, v in hist.items():
        print(f"{k}\t{v}")
    print(f"#fraction_le_{cfg.r_max}\t{frac:.4f}")


def cmd_export_ply(cfg, args):
    cloud = read_cloud(args.input)
    labels = M.read_parts(args.parts) if args.parts else cloud.labels
    export_ply(args.output, cloud, labels)
    print(f"ply\t{args.output}")


def cmd_sweep(cfg, args):
    from .sweep import run_sweep

    resolutions = [int(v) for v in args.resolutions.split(",") if v]
    layers = [int(v) for v in args.layer_values.split(",") if v]
    table = args.table or Path(cfg.out) / "sweep.tsv"
    rows = run_sweep(cfg, resolutions, layers, table, train=args.train)
    print(f"sweep\t{len(rows)}\trows\t{table}")


HANDLERS = {
    "gen-data": cmd_gen_data, "train-prior": cmd_train_prior, "segment-blocks": cmd_segment_blocks,
    "train-merge": cmd_train_merge, "segment": cmd_segment, "eval": cmd_eval, "stats": cmd_stats,
    "export-ply": cmd_export_ply, "sweep": cmd_sweep,
}


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, PL.StageError):
        return "missing-prerequisite"
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return "io"
    if "checkpoint" in str(exc).lower():
        return "checkpoint"
    return "input"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, args)
    except (ValueError, OSError, RuntimeError) as exc:
        message = str(exc).replace("\n", " ").replace("\t", " ")
        print(f"error\t{_error_kind(exc)}\t{message}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
