"""Resolution and layer-count sweep.

One PriorNet is trained per resolution under ``<out>/sweep/r<R>``; each layer
count reuses it and keeps its merge networks and part files under a
``_L<n>`` suffix. Settings without checkpoints are reported as absent unless
training is requested.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

from . import pipeline as PL
from .config import PipelineConfig

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("resolution", "layers", "status", "avg_iou", "small_iou", "pred_parts", "gt_parts", "reason")


def setting_config(cfg: PipelineConfig, resolution: int, layers: int) -> tuple[PipelineConfig, str]:
    out = Path(cfg.out) / "sweep" / f"r{resolution}"
    return cfg.with_overrides(resolution=resolution, layers=layers, out=str(out)), f"_L{layers}"


def run_setting(cfg: PipelineConfig, resolution: int, layers: int, train: bool) -> dict:
    scfg, variant = setting_config(cfg, resolution, layers)
    lay = PL.Layout.of(scfg, variant)
    row = {"resolution": resolution, "layers": layers}
    try:
        if not lay.prior.exists():
            if not train:
                return {**row, "status": "absent", "reason": f"no PriorNet checkpoint at {lay.prior}"}
            PL.train_prior(scfg)
        families = list(scfg.families) if scfg.per_family else [None]
        if not all(lay.merge_ckpt(f).exists() for f in families):
            if not train:
                return {**row, "status": "absent", "reason": f"no MergeNet checkpoints in {lay.merge_dir}"}
            PL.train_merge(scfg, variant)
        PL.segment_split(scfg, "test", variant)
        summary = PL.evaluate_split(scfg, "test", None, variant)
    except (ValueError, OSError, RuntimeError) as exc:
        return {**row, "status": "absent", "reason": str(exc).replace("\t", " ").replace("\n", " ")}
    return {**row, "status": "ok", **summary, "reason": ""}


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def run_sweep(cfg: PipelineConfig, resolutions: Sequence[int], layers: Sequence[int], table, train: bool = False) -> list[dict]:
    rows = []
    for r in resolutions:
        for l in layers:
            log.info("sweep setting resolution=%d layers=%d", r, l)
            rows.append(run_setting(cfg, r, l, train))
    Path(table).parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(SWEEP_COLUMNS)]
    lines.extend("\t".join(_fmt(row.get(c, "NA" if c != "reason" else "")) for c in SWEEP_COLUMNS) for row in rows)
    Path(table).write_text("\n".join(lines) + "\n")
    return rows
