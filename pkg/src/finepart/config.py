"""Pipeline configuration: an INI-style ``key = value`` file with sections.

Every field has a default; a file only needs the keys it changes. Unknown
sections or keys are errors so typos cannot silently fall back to defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .synthdata import FAMILIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # [data]
    data_root: str = "data"
    families: tuple[str, ...] = tuple(FAMILIES)
    shapes_per_family: int = 40
    points_total: int = 20_000
    test_fraction: float = 0.2
    # [partition]
    resolution: int = 7
    block_size: int = 512
    # [prior]
    margin: float = 100.0
    r_max: int = 5
    prior_batch_size: int = 24
    prior_epochs: int = 100
    per_count: int = 400
    prior_lr: float = 1e-3
    use_lowrank: bool = True
    # [merge]
    r_max_merge: int = 100
    layers: int = 3
    merge_batch_size: int = 4
    merge_epochs: int = 100
    merge_lr: float = 1e-3
    per_family: bool = True
    epsilon_factor: float = 2.0
    epsilon: float | None = None
    split_parts: bool = False
    min_part_fraction: float = 0.0
    # [run]
    seed: int = 0
    threads: int = 1
    out: str = "run"

    def __post_init__(self):
        checks = [
            (self.resolution >= 1, "resolution must be >= 1"),
            (self.block_size >= 1, "block_size must be >= 1"),
            (self.margin > 0, "margin must be positive"),
            (1 <= self.r_max, "r_max must be >= 1"),
            (1 <= self.r_max_merge, "r_max_merge must be >= 1"),
            (self.layers >= 0, "layers must be >= 0"),
            (self.prior_batch_size >= 1 and self.merge_batch_size >= 1, "batch sizes must be >= 1"),
            (self.prior_epochs >= 1 and self.merge_epochs >= 1, "epochs must be >= 1"),
            (self.per_count >= 1, "per_count must be >= 1"),
            (self.prior_lr > 0 and self.merge_lr > 0, "learning rates must be positive"),
            (0.0 < self.test_fraction < 1.0, "test_fraction must lie in (0, 1)"),
            (self.epsilon is None or self.epsilon >= 0, "epsilon must be nonnegative"),
            (self.epsilon_factor >= 0, "epsilon_factor must be nonnegative"),
            (0.0 <= self.min_part_fraction < 1.0, "min_part_fraction must lie in [0, 1)"),
            (self.threads >= 1, "threads must be >= 1"),
            (len(self.families) > 0, "families must not be empty"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        unknown = [f for f in self.families if f not in FAMILIES]
        if unknown:
            raise ConfigError(f"unknown families {unknown}; choose from {list(FAMILIES)}")

    def with_overrides(self, **changes) -> "PipelineConfig":
        bad = [k for k in changes if k not in FIELD_NAMES]
        if bad:
            raise ConfigError(f"unknown config keys {bad}")
        return replace(self, **changes)


SECTIONS: dict[str, tuple[str, ...]] = {
    "data": ("data_root", "families", "shapes_per_family", "points_total", "test_fraction"),
    "partition": ("resolution", "block_size"),
    "prior": ("margin", "r_max", "prior_batch_size", "prior_epochs", "per_count", "prior_lr", "use_lowrank"),
    "merge": ("r_max_merge", "layers", "merge_batch_size", "merge_epochs", "merge_lr", "per_family",
              "epsilon_factor", "epsilon", "split_parts", "min_part_fraction"),
    "run": ("seed", "threads", "out"),
}
FIELD_NAMES = tuple(f.name for f in fields(PipelineConfig))
_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def parse_value(key: str, text: str):
    """Convert a string to the type of field ``key``."""
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("", "none", "auto") else float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "tuple[str, ...]":
            return tuple(t.strip() for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def load_config(path) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep keys case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}".replace("\n", " ")) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[key] = parse_value(key, raw)
    return PipelineConfig(**values)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = getattr(cfg, key)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif v is None:
                v = "auto"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def write_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(dump_config(cfg))
