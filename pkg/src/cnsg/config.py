"""Run configuration: dataclasses, JSON (de)serialization, overrides, hashing."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or unreadable config files."""


@dataclass
class DataConfig:
    root: str = ""
    source_domain: str = "studio"
    num_seeds: int = 64
    resolution: int = 96
    num_objects: int = 1
    num_classes: int = 5

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ConfigError("data.num_seeds must be >= 1")
        if self.resolution < 16:
            raise ConfigError("data.resolution must be >= 16")


@dataclass
class ModelConfig:
    stage_channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 2, 1)
    convs_per_stage: int = 2
    bias: bool = True
    aspp_channels: int = 64
    aspp_rates: tuple = (1, 2, 4)
    reasoned_dim: int = 64

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        if len(self.stage_channels) != len(self.strides):
            raise ConfigError("model.stage_channels and model.strides must have equal length")


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    clip_grad_norm: float = 10.0  # 0 disables clipping

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("optimizer.lr must be positive")
        if self.clip_grad_norm < 0:
            raise ConfigError("optimizer.clip_grad_norm must be >= 0")


@dataclass
class LossWeights:
    seg: float = 1.0
    cls: float = 1.0
    sca: float = 1.0

    def __post_init__(self):
        if min(self.seg, self.cls, self.sca) < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 0.3
    ema_lambda: float = 0.9
    use_nsfr: bool = True
    use_nsca: bool = True
    schedule_power: float = 0.9
    iterations: int = 600
    batch_size: int = 4
    augment_strength: float = 0.5
    seed: int = 0
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigError("ema_lambda must lie in [0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.augment_strength < 0:
            raise ConfigError("augment_strength must be >= 0")


_NESTED = {
    "data": DataConfig,
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "loss_weights": LossWeights,
}


def to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def _build(cls, payload: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}{key}' (valid: {', '.join(sorted(known))})")
        nested = _NESTED.get(key) if cls is RunConfig else None
        if nested is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be an object")
            kwargs[key] = _build(nested, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"bad config section '{path or 'root'}': {err}") from err


def from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    return _build(RunConfig, payload, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config parse error in {path} at line {err.lineno}: {err.msg}") from err
    return from_dict(payload)


def apply_override(payload: dict, dotted_key: str, raw_value: str) -> dict:
    """Set payload[a][b]... = parsed(raw_value) for dotted_key 'a.b....'; strict keys."""
    parts = dotted_key.split(".")
    node = payload
    trail = ""
    for part in parts[:-1]:
        trail += part + "."
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section '{trail.rstrip('.')}'")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key '{dotted_key}' (valid here: {', '.join(sorted(node))})")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[leaf] = value
    return payload


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def save_config(config: RunConfig, path):
    Path(path).write_text(json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n")
