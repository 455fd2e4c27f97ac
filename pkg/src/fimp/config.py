"""Training/model configuration and the flat key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from fimp.errors import ConfigError

STRATEGIES = ("affinity_topk", "local_region", "nearest_order")

MAX_ZONES = 16  # zone positional table size; fixed so checkpoints match across Z


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference training recipe."""

    feature_dim: int = 128
    heads: int = 8
    modes: int = 6
    zones: int = 5
    topk: int = 10
    agent_radius: float = 50.0
    lane_radius: float = 50.0
    future_lane_radius: float = 100.0
    t_future: int = 30
    temporal_layers: int = 4
    lane_layers: int = 1
    agent_layers: int = 3
    future_lane_layers: int = 1
    future_agent_layers: int = 3
    zone_attn_layers: int = 4
    motion_hidden: int = 64
    dropout: float = 0.1
    strategy: str = "affinity_topk"
    strategy_radius: float = 50.0
    use_history_aa: bool = True
    use_future_al: bool = True
    use_future_aa: bool = True
    lr: float = 0.0005
    weight_decay: float = 0.0001
    batch_size: int = 32
    epochs: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.feature_dim <= 1 or self.feature_dim % self.heads != 0:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must be >1 and divisible by heads {self.heads}")
        if self.zones < 1 or self.t_future % self.zones != 0:
            raise ConfigError(f"zones {self.zones} must divide t_future {self.t_future}")
        if self.zones > MAX_ZONES:
            raise ConfigError(f"zones {self.zones} exceeds the positional table ({MAX_ZONES})")
        if self.modes < 1 or self.topk < 1:
            raise ConfigError("modes and topk must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        for name in ("agent_radius", "lane_radius", "future_lane_radius",
                     "strategy_radius", "lr", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)

    def canonical(self) -> str:
        """Stable text form of the full configuration."""
        pairs = [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]
        return "\n".join(f"{k} = {v}" for k, v in pairs) + "\n"

    # Fields that determine parameter shapes; zone count and horizon are
    # runtime choices (the zone positional table has a fixed capacity), so
    # one checkpoint serves every Z at the same shape.
    MODEL_FIELDS = ("feature_dim", "heads", "modes", "temporal_layers",
                    "lane_layers", "agent_layers", "future_lane_layers",
                    "future_agent_layers", "zone_attn_layers", "motion_hidden")

    def model_canonical(self) -> str:
        """Stable text form of the shape-determining fields (checkpoint hash)."""
        return "\n".join(f"{k} = {getattr(self, k)}" for k in self.MODEL_FIELDS) + "\n"


def _convert(name: str, value: str, target_type):
    value = value.strip()
    try:
        if target_type is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return target_type(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {value!r}") from e


def parse_overrides(pairs, base: TrainConfig | None = None) -> TrainConfig:
    """Apply `key=value` strings onto a config; unknown keys are rejected."""
    cfg = base or TrainConfig()
    field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    py_types = {"int": int, "float": float, "str": str, "bool": bool}
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in field_types:
            raise ConfigError(f"unknown config key {key!r}")
        t = field_types[key]
        t = py_types[t] if isinstance(t, str) else t
        updates[key] = _convert(key, value, t)
    return cfg.replace(**updates)


def load_config(path, overrides=()) -> TrainConfig:
    """Read a flat key=value text file ('#' starts a comment)."""
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            pairs.append(line)
    cfg = parse_overrides(pairs)
    return parse_overrides(overrides, base=cfg) if overrides else cfg


def save_config(path, cfg: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.canonical())
