"""Textual key=value run configuration covering every tunable default.

Unknown keys are rejected, and every CLI run writes its resolved config next
to its outputs so experiments are self-describing. ``OF3D_THREADS`` caps
worker threads (default 1, which keeps runs bit-reproducible across thread
settings as well).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .errors import ConfigError

QUERY_MODES = ("joint", "instance_only", "semantic_only")
POOLING_MODES = ("superpoint", "voxel")
MATCHERS = ("disentangled", "hungarian")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # partitioning
    pooling: str = "superpoint"
    voxel_size: float = 0.02
    sp_k_neighbors: int = 16
    sp_angle_deg: float = 20.0
    sp_color_bound: float = 0.2
    sp_min_size: int = 5
    # encoder
    feat_dim: int = 32
    encoder_depth: int = 3
    encoder_radius: float = 0.3
    # decoder
    decoder_layers: int = 6
    attn_heads: int = 4
    query_mode: str = "joint"
    # matching / losses
    matcher: str = "disentangled"
    lambda_cls: float = 0.5
    beta_cls: float = 0.5
    sem_loss_weight: float = 1.0
    # trainer
    lr: float = 1e-4
    weight_decay: float = 0.05
    steps: int = 500
    batch_size: int = 4
    sched_power: float = 0.9
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    log_timings: bool = False
    resume: str = ""
    # augmentation
    aug_flip: bool = True
    aug_rotate: bool = True
    aug_scale: bool = True
    # inference
    mask_threshold: float = 0.5
    nms_sigma: float = 2.0
    nms_top_k: int = 100

    def __post_init__(self):
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.matcher not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}")
        if self.lr <= 0 or self.voxel_size <= 0 or self.batch_size < 1:
            raise ConfigError("rates, sizes and counts must be positive")
        if not (0.0 < self.sched_power <= 1.0):
            raise ConfigError("sched_power must lie in (0, 1]")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("step counts must be >= 0")


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw not in ("true", "false"):
            raise ConfigError(f"{key} expects true/false, got {raw!r}")
        return raw == "true"
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def apply_overrides(config: RunConfig, pairs) -> RunConfig:
    """Apply 'key=value' strings; unknown keys are an error."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}")
    return replace(config, **updates)


def serialize_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        pairs = [line for line in (l.strip() for l in fh) if line and not line.startswith("#")]
    return apply_overrides(RunConfig(), pairs)


def save_config(config: RunConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_config(config).encode("utf-8"))


def thread_count() -> int:
    raw = os.environ.get("OF3D_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"OF3D_THREADS must be an integer, got {raw!r}")
    if count < 1:
        raise ConfigError("OF3D_THREADS must be >= 1")
    return count
