"""Procedural shapes with exact fine-grained part labels, plus point cloud file I/O.

Each shape is an arrangement of boxes, cylinders and spheres; every primitive is
one part. Surfaces are sampled with per-part point counts proportional to area.
"""
from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import PointCloud, normalize_cloud

log = logging.getLogger(__name__)

SMALL_PART_FRACTION = 0.15
DEFAULT_POINTS = 20_000


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- primitives

def _rot_to(axis: np.ndarray) -> np.ndarray:
    """Rotation whose third column is the unit vector ``axis``."""
    z = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class Primitive:
    kind: str  # "box" | "cylinder" | "sphere"
    centre: np.ndarray
    size: np.ndarray  # box: half extents; cylinder: (radius, half length); sphere: (radius,)
    rotation: np.ndarray

    @property
    def area(self) -> float:
        if self.kind == "box":
            a, b, c = self.size
            return 8.0 * (a * b + b * c + a * c)
        if self.kind == "cylinder":
            r, h = self.size
            return 2.0 * math.pi * r * (2.0 * h) + 2.0 * math.pi * r * r
        (r,) = self.size
        return 4.0 * math.pi * r * r

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "box":
            local = _sample_box(self.size, n, rng)
        elif self.kind == "cylinder":
            local = _sample_cylinder(*self.size, n, rng)
        else:
            v = rng.standard_normal((n, 3))
            local = v / np.linalg.norm(v, axis=1, keepdims=True) * self.size[0]
        return local @ self.rotation.T + self.centre


def box(centre, half, rotation=None) -> Primitive:
    return Primitive("box", np.asarray(centre, float), np.asarray(half, float), np.eye(3) if rotation is None else rotation)


def cylinder(p0, p1, radius) -> Primitive:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    return Primitive("cylinder", (p0 + p1) / 2, np.array([radius, np.linalg.norm(axis) / 2]), _rot_to(axis))


def sphere(centre, radius) -> Primitive:
    return Primitive("sphere", np.asarray(centre, float), np.array([radius]), np.eye(3))


def _sample_box(half: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    a, b, c = half
    faces = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=faces / faces.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    u[np.arange(n), axis] = sign * half[axis]
    return u


def _sample_cylinder(r: float, h: float, n: int, rng: np.random.Generator) -> np.ndarray:
    side = 2.0 * math.pi * r * 2.0 * h
    cap = math.pi * r * r
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, n)))
    z = np.where(which == 0, rng.uniform(-h, h, n), np.where(which == 1, -h, h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


# ---------------------------------------------------------------- families
# Each builder takes a part count and a generator and returns primitives in an
# order where every prefix is still a connected arrangement.

def _ladder(n: int, rng: np.random.Generator) -> list[Primitive]:
    w = rng.uniform(0.09, 0.13)
    t, depth = 0.018, rng.uniform(0.025, 0.035)
    parts = [box([-w / 2, 0, 0.5], [t / 2, depth / 2, 0.5])]
    if n >= 2:
        parts.append(box([w / 2, 0, 0.5], [t / 2, depth / 2, 0.5]))
    rungs = n - 2
    if rungs > 0:
        gap = 1.0 / (rungs + 1)
        radius = rng.uniform(0.007, 0.010)
        for k in range(rungs):
            z = (k + 1) * gap + rng.uniform(-0.1, 0.1) * gap
            parts.append(cylinder([-w / 2 + t / 2, 0, z], [w / 2 - t / 2, 0, z], radius))
    return parts


def _fence(n: int, rng: np.random.Generator) -> list[Primitive]:
    h = rng.uniform(0.24, 0.30)
    picket_h = rng.uniform(0.12, 0.135)
    z0 = h - picket_h - rng.uniform(0.01, 0.03)
    rail_zs = (z0 + 0.02, z0 + picket_h - 0.02)
    post = 0.015
    parts = [box([0.5, 0, rail_zs[0]], [0.5 - post, 0.008, 0.01])]
    if n >= 2:
        parts.append(box([0.5, 0, rail_zs[1]], [0.5 - post, 0.008, 0.01]))
    if n >= 3:
        parts.append(box([post, 0, h / 2], [post, post, h / 2]))
    if n >= 4:
        parts.append(box([1 - post, 0, h / 2], [post, post, h / 2]))
    pickets = n - 4
    if pickets > 0:
        gap = (1 - 4 * post) / (pickets + 1)
        for k in range(pickets):
            x = 2 * post + (k + 1) * gap + rng.uniform(-0.08, 0.08) * gap
            parts.append(box([x, 0.014, z0 + picket_h / 2], [0.006, 0.006, picket_h / 2]))
    return parts


def _table(n: int, rng: np.random.Generator) -> list[Primitive]:
    L, W = 1.0, rng.uniform(0.55, 0.65)
    top_z = rng.uniform(0.66, 0.72)
    leg = 0.025
    foot = rng.uniform(0.03, 0.04)
    leg_lo = 2 * foot
    xs, ys = (leg + 0.02, L - leg - 0.02), (leg + 0.02, W - leg - 0.02)
    corners = [(x, y) for x in xs for y in ys]
    parts = [box([L / 2, W / 2, top_z + 0.02], [L / 2, W / 2, 0.02])]
    for x, y in corners:
        parts.append(box([x, y, (top_z + leg_lo) / 2], [leg, leg, (top_z - leg_lo) / 2]))
    for x, y in corners:
        parts.append(sphere([x, y, foot], foot))
    apron_z = top_z - 0.04
    parts.append(box([L / 2, ys[0], apron_z], [(xs[1] - xs[0]) / 2 - leg, 0.01, 0.04]))
    parts.append(box([L / 2, ys[1], apron_z], [(xs[1] - xs[0]) / 2 - leg, 0.01, 0.04]))
    parts.append(box([xs[0], W / 2, apron_z], [0.01, (ys[1] - ys[0]) / 2 - leg, 0.04]))
    parts.append(box([xs[1], W / 2, apron_z], [0.01, (ys[1] - ys[0]) / 2 - leg, 0.04]))
    st_z = rng.uniform(0.18, 0.24)
    parts.append(box([L / 2, ys[0], st_z], [(xs[1] - xs[0]) / 2 - leg, 0.012, 0.012]))
    parts.append(box([L / 2, ys[1], st_z], [(xs[1] - xs[0]) / 2 - leg, 0.012, 0.012]))
    slats = max(0, n - 15)
    if slats:
        gap = (xs[1] - xs[0]) / (slats + 1)
        for k in range(slats):
            x = xs[0] + (k + 1) * gap
            parts.append(box([x, W / 2, st_z + 0.02], [0.02, (ys[1] - ys[0]) / 2, 0.008]))
    return parts[:n]


def _chair(n: int, rng: np.random.Generator) -> list[Primitive]:
    s = rng.uniform(0.42, 0.48)
    seat_z = rng.uniform(0.42, 0.47)
    leg = 0.02
    top = rng.uniform(0.92, 0.98)
    xs, ys = (leg, s - leg), (leg, s - leg)
    parts = [box([s / 2, s / 2, seat_z + 0.02], [s / 2, s / 2, 0.02])]
    glide = 0.012
    for x in xs:
        for y in ys:
            parts.append(box([x, y, (seat_z + 2 * glide) / 2], [leg, leg, (seat_z - 2 * glide) / 2]))
    for x in xs:
        for y in ys:
            parts.append(cylinder([x, y, 0.0], [x, y, 2 * glide], glide))
    for x in xs:
        parts.append(box([x, ys[1], (seat_z + 0.04 + top) / 2], [leg, leg, (top - seat_z - 0.04) / 2]))
    rail_lo = top - rng.uniform(0.17, 0.19)
    rail_hi = top - 0.03
    for z in (rail_lo, rail_hi):
        parts.append(box([s / 2, ys[1], z], [s / 2 - 2 * leg, 0.012, 0.015]))
    spindles = max(0, n - 13)
    if spindles:
        gap = (s - 4 * leg) / (spindles + 1)
        for k in range(spindles):
            x = 2 * leg + (k + 1) * gap
            parts.append(cylinder([x, ys[1], rail_lo + 0.015], [x, ys[1], rail_hi - 0.015], 0.008))
    return parts[:n]


def _wheel(n: int, rng: np.random.Generator) -> list[Primitive]:
    R, hub_r = 0.5, rng.uniform(0.095, 0.11)
    rim_t, depth = 0.015, rng.uniform(0.025, 0.035)
    parts = [cylinder([0, -depth, 0], [0, depth, 0], hub_r)]
    if n == 1:
        return parts
    if n < 5:
        spokes, segs = n - 1, 0
    else:
        spokes = int(np.clip(n - 21, 3, 10))
        segs = n - 1 - spokes
    phase = rng.uniform(0, 2 * math.pi)
    for k in range(spokes):
        a = phase + 2 * math.pi * k / spokes
        d = np.array([math.cos(a), 0.0, math.sin(a)])
        parts.append(cylinder(d * hub_r, d * (R - rim_t), 0.008))
    if segs:
        chord = 2 * R * math.sin(math.pi / segs)
        for k in range(segs):
            a = 2 * math.pi * (k + 0.5) / segs
            centre = np.array([math.cos(a), 0.0, math.sin(a)]) * R * math.cos(math.pi / segs)
            # local x runs along the tangent, local z along the radius
            rot = _rot_y(-a + math.pi / 2)
            parts.append(box(centre, [chord / 2, depth, rim_t], rot))
    return parts


FAMILIES: dict[str, Callable[[int, np.random.Generator], list[Primitive]]] = {
    "ladder": _ladder,
    "fence": _fence,
    "table": _table,
    "chair": _chair,
    "wheel": _wheel,
}

# default part-count ranges per family (all fit in 4..40)
FAMILY_RANGES: dict[str, tuple[int, int]] = {
    "ladder": (4, 14),
    "fence": (4, 16),
    "table": (9, 20),
    "chair": (7, 17),
    "wheel": (24, 36),
}

# counts a family can build while keeping its tiny-part quota
FAMILY_LIMITS: dict[str, tuple[int, int]] = {
    "ladder": (1, 20),
    "fence": (1, 17),
    "table": (1, 20),
    "chair": (1, 17),
    "wheel": (1, 36),
}


@dataclass
class ShapeSpec:
    family: str
    part_count_range: tuple[int, int] | None = None
    points_total: int = DEFAULT_POINTS
    seed: int = 0

    def resolved_range(self) -> tuple[int, int]:
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}; choose from {sorted(FAMILIES)}")
        lo, hi = self.part_count_range or FAMILY_RANGES[self.family]
        flo, fhi = FAMILY_LIMITS[self.family]
        lo, hi = max(lo, flo), min(hi, fhi)
        if lo > hi:
            raise DataError(f"part_count_range {self.part_count_range} infeasible for {self.family} (limits {flo}..{fhi})")
        return lo, hi


@dataclass
class LabeledCloud(PointCloud):
    part_count: int = 0
    family: str = ""


def _apportion(areas: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``areas``; every part gets at least one."""
    if total < len(areas):
        raise DataError(f"{total} points cannot cover {len(areas)} parts")
    share = areas / areas.sum() * total
    counts = np.floor(share).astype(np.int64)
    rest = total - counts.sum()
    order = np.lexsort((np.arange(len(areas)), -(share - counts)))
    counts[order[:rest]] += 1
    while np.any(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return counts


def small_part_mask(points: np.ndarray, labels: np.ndarray, fraction: float = SMALL_PART_FRACTION) -> np.ndarray:
    """Per part id: is its AABB diagonal below ``fraction`` of the whole shape's diagonal?"""
    diag = np.linalg.norm(points.max(axis=0) - points.min(axis=0))
    k = int(labels.max()) + 1
    out = np.zeros(k, dtype=bool)
    for p in range(k):
        sel = points[labels == p]
        if len(sel):
            out[p] = np.linalg.norm(sel.max(axis=0) - sel.min(axis=0)) < fraction * diag
    return out


def generate_shape(spec: ShapeSpec) -> LabeledCloud:
    """Build one normalized labeled shape; deterministic in ``spec``."""
    lo, hi = spec.resolved_range()
    rng = np.random.default_rng(spec.seed)
    n = int(rng.integers(lo, hi + 1))
    prims = FAMILIES[spec.family](n, rng)
    if len(prims) != n:
        raise DataError(f"{spec.family} produced {len(prims)} parts, wanted {n}")
    counts = _apportion(np.array([p.area for p in prims]), spec.points_total)
    pts = np.concatenate([p.sample(int(c), rng) for p, c in zip(prims, counts)])
    labels = np.repeat(np.arange(n), counts)
    cloud = normalize_cloud(PointCloud(pts, labels))
    small = small_part_mask(cloud.points, labels)
    if small.sum() < math.floor(0.2 * n):
        raise DataError(f"{spec.family} with {n} parts has only {small.sum()} tiny parts")
    return LabeledCloud(cloud.points, labels, None, part_count=n, family=spec.family)


# ---------------------------------------------------------------- file formats

def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix == ".ply":
        export_ply(path, cloud)
        return
    if path.suffix not in (".xyz", ".txt"):
        raise DataError(f"unknown point cloud extension {path.suffix!r}")
    lines = []
    if cloud.labels is None:
        for x, y, z in cloud.points.tolist():
            lines.append(f"{x!r} {y!r} {z!r}")
    else:
        for (x, y, z), lab in zip(cloud.points.tolist(), cloud.labels.tolist()):
            lines.append(f"{x!r} {y!r} {z!r} {lab}")
    path.write_text("\n".join(lines) + "\n")


def read_cloud(path) -> PointCloud:
    """Read ``x y z [label]`` lines; ``#`` starts a comment."""
    path = Path(path)
    if path.suffix not in (".xyz", ".txt"):
        raise DataError(f"unknown point cloud extension {path.suffix!r}")
    pts: list[tuple[float, float, float]] = []
    labels: list[int] = []
    width = None
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise DataError(f"{path}:{lineno}: label/point count mismatch (row has {len(fields)} fields, earlier rows {width})")
            try:
                pts.append((float(fields[0]), float(fields[1]), float(fields[2])))
                if width == 4:
                    labels.append(int(fields[3]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not pts:
        raise DataError(f"{path}: no points")
    return PointCloud(np.array(pts), np.array(labels, dtype=np.int64) if width == 4 else None)


def palette(size: int = 64) -> np.ndarray:
    """Fixed colour table: golden-angle hue walk with three alternating brightness levels."""
    out = np.zeros((size, 3), dtype=np.int64)
    for i in range(size):
        h = (i * 0.618033988749895) % 1.0
        v = (1.0, 0.75, 0.55)[i % 3]
        s = (0.85, 0.65)[i % 2]
        out[i] = np.round(np.array(colorsys.hsv_to_rgb(h, s, v)) * 255)
    return out


def export_ply(path, cloud: PointCloud, labels: np.ndarray | None = None) -> None:
    labels = cloud.labels if labels is None else np.asarray(labels)
    colours = palette()
    n = len(cloud.points)
    head = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = []
    for i, (x, y, z) in enumerate(cloud.points.tolist()):
        r, g, b = colours[int(labels[i]) % len(colours)] if labels is not None else (200, 200, 200)
        body.append(f"{x!r} {y!r} {z!r} {r} {g} {b}")
    Path(path).write_text("\n".join(head + body) + "\n")


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetConfig:
    out_dir: Path
    families: Sequence[str] = tuple(FAMILIES)
    shapes_per_family: int = 40
    points_total: int = DEFAULT_POINTS
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class ManifestEntry:
    path: str
    family: str
    part_count: int
    split: str


def shape_seed(seed: int, family: str, index: int) -> int:
    fam = sorted(FAMILIES).index(family)
    return int(np.random.SeedSequence([seed, fam, index]).generate_state(1)[0])


def _split(families: Sequence[str], per_family: int, seed: int, test_fraction: float) -> dict[tuple[str, int], str]:
    quota = np.array([per_family * test_fraction] * len(families))
    base = np.floor(quota + 1e-9).astype(int)
    extra = int(round(quota.sum())) - int(base.sum())
    order = np.lexsort((np.arange(len(families)), -(quota - base)))
    base[order[:extra]] += 1
    out = {}
    for fi, fam in enumerate(families):
        perm = np.random.default_rng([seed, 7919, fi]).permutation(per_family)
        test = set(perm[: base[fi]].tolist())
        for k in range(per_family):
            out[(fam, k)] = "test" if k in test else "train"
    return out


def make_dataset(cfg: DatasetConfig) -> list[ManifestEntry]:
    """Generate shapes and write ``manifest.tsv`` plus one ``.xyz`` file per shape."""
    if not cfg.families:
        raise DataError("dataset needs at least one family")
    out = Path(cfg.out_dir)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    split = _split(list(cfg.families), cfg.shapes_per_family, cfg.seed, cfg.test_fraction)
    entries = []
    for fam in cfg.families:
        for k in range(cfg.shapes_per_family):
            spec = ShapeSpec(fam, None, cfg.points_total, shape_seed(cfg.seed, fam, k))
            shape = generate_shape(spec)
            rel = f"shapes/{fam}_{k:04d}.xyz"
            write_cloud(out / rel, shape)
            entries.append(ManifestEntry(rel, fam, shape.part_count, split[(fam, k)]))
    write_manifest(out / "manifest.tsv", entries)
    log.info("wrote %d shapes to %s", len(entries), out)
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    Path(path).write_text("".join(f"{e.path}\t{e.family}\t{e.part_count}\t{e.split}\n" for e in entries))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4 or fields[3] not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: malformed manifest row")
        entries.append(ManifestEntry(fields[0], fields[1], int(fields[2]), fields[3]))
    return entries


def load_shape(root, entry: ManifestEntry) -> LabeledCloud:
    cloud = read_cloud(Path(root) / entry.path)
    if cloud.labels is None:
        raise DataError(f"{entry.path}: shape file has no labels")
    return LabeledCloud(cloud.points, cloud.labels, None, part_count=entry.part_count, family=entry.family)
