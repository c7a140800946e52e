"""Layered run configuration: defaults < config file < command-line overrides.

The file format is plain text, one dotted key per line::

    # training setup
    train.steps = 1500
    model.group_radius = 1.2, 1.2, 0.6, 0.6

Values are parsed against the declared field types; unknown keys are
rejected so typos cannot silently fall back to defaults.  The canonical
serialization of a config hashes to a stable id that every artifact embeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class DataConfig:
    range_m: float = 36.0
    point_budget: int = 2000
    num_scenes: int = 200
    holdout_scenes: int = 40
    boxes_min: int = 3
    boxes_max: int = 7
    class_mix: tuple = (0.3, 0.25, 0.225, 0.225)
    clutter_fraction: float = 0.25


@dataclass
class ModelConfig:
    voxel_size: float = 0.25
    point_in_channels: int = 4
    encoder_vfe_hidden: int = 16
    encoder_channels: int = 32
    encoder_rounds: int = 2
    vote_hidden: int = 32
    group_radius: tuple = (1.2, 2.5, 0.9, 0.9)
    fg_threshold: float = 0.3
    sir_layers: int = 3
    sir_channels: int = 32
    sir2_layers: int = 6
    sir2_channels: int = 32
    head_hidden: int = 64
    proposal_nms_iou: float = 0.3
    nms_iou: float = 0.25
    score_threshold: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    checkpoint_every: int = 500
    dtype: str = "float32"
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    residual_iou_threshold: float = 0.15


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    length_bins: tuple = (0.0, 4.0, 8.0, 12.0)


@dataclass
class BenchConfig:
    ranges: tuple = (50.0, 100.0, 200.0)
    repeats: int = 5
    point_budget: int = 2000
    dense_cell: float = 0.5
    dense_channels: int = 8
    dense_layers: int = 6
    dense_memory_cap_mb: float = 4096.0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_SECTIONS = {f.name for f in fields(RunConfig) if dataclasses.is_dataclass(f.type) or f.name != "seed"}


def _parse_value(raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) if "." in p or "e" in p.lower() else float(int(p)) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(like).__name__}") from exc


def set_key(cfg: RunConfig, dotted: str, raw_value: str) -> None:
    parts = dotted.strip().split(".")
    if len(parts) == 1:
        if parts[0] != "seed":
            raise ConfigError(f"unknown config key {dotted!r}")
        cfg.seed = int(_parse_value(raw_value, 0))
        return
    if len(parts) != 2:
        raise ConfigError(f"keys have at most two levels, got {dotted!r}")
    section, name = parts
    sub = getattr(cfg, section, None)
    if sub is None or not dataclasses.is_dataclass(sub):
        raise ConfigError(f"unknown config section {section!r}")
    if not hasattr(sub, name):
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(sub, name, _parse_value(raw_value, getattr(sub, name)))


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = body.split("=", 1)
            set_key(cfg, key, val)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        key, val = ov.split("=", 1)
        set_key(cfg, key, val)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.model.voxel_size <= 0:
        raise ConfigError("model.voxel_size must be positive")
    if any(r <= 0 for r in cfg.model.group_radius):
        raise ConfigError("model.group_radius entries must be positive")
    if not 0.0 <= cfg.model.fg_threshold < 1.0:
        raise ConfigError("model.fg_threshold must be in [0, 1)")
    if len(cfg.train.loss_weights) != 6:
        raise ConfigError("train.loss_weights needs exactly six entries")
    if cfg.train.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype must be float32 or float64")
    if cfg.data.point_budget <= 0:
        raise ConfigError("data.point_budget must be positive")
    if len(cfg.eval.length_bins) < 1:
        raise ConfigError("eval.length_bins must not be empty")
    if list(cfg.bench.ranges) != sorted(cfg.bench.ranges):
        raise ConfigError("bench.ranges must be ascending")


def to_lines(cfg: RunConfig) -> list[str]:
    """Canonical, sorted key=value serialization."""
    lines = [f"seed = {cfg.seed}"]
    for f in fields(cfg):
        sub = getattr(cfg, f.name)
        if not dataclasses.is_dataclass(sub):
            continue
        for sf in fields(sub):
            v = getattr(sub, sf.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{f.name}.{sf.name} = {v}")
    return sorted(lines)


def config_hash(cfg: RunConfig) -> str:
    digest = hashlib.sha256("\n".join(to_lines(cfg)).encode("utf-8"))
    return digest.hexdigest()


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(to_lines(cfg)) + "\n")
