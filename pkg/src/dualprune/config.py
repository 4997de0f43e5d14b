"""Run configuration: nested dataclasses loaded from JSON, validated up front."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from dualprune.pruning.schedule import PruneSchedule


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    bottleneck_blocks: int = 2
    use_separable: bool = True
    masked_bn: bool = True
    kernel_size: int = 3
    gamma_init: str = "uniform"

    def validate(self) -> None:
        if len(self.channels) < 2 or any(not isinstance(c, int) or c < 1 for c in self.channels):
            raise ConfigError(f"model.channels must list >= 2 positive ints, got {self.channels}")
        if self.bottleneck_blocks < 0:
            raise ConfigError("model.bottleneck_blocks must be >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"model.kernel_size must be odd and positive, got {self.kernel_size}")
        if self.gamma_init not in ("uniform", "ones"):
            raise ConfigError(f"model.gamma_init must be 'uniform' or 'ones', got {self.gamma_init!r}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("optimizer.learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")


@dataclass
class DataConfig:
    image_size: int = 64
    blob_count: int = 3
    noise_level: float = 0.1
    dataset_size: int = 256
    val_size: int = 64
    batch_size: int = 8

    def validate(self) -> None:
        if self.image_size < 1 or self.blob_count < 1 or self.dataset_size < 1 or self.val_size < 1:
            raise ConfigError("data sizes and blob_count must be positive")
        if self.batch_size < 1:
            raise ConfigError("data.batch_size must be positive")
        if self.noise_level < 0:
            raise ConfigError("data.noise_level must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epsilon_band: float = 1.0
    tau_init: float = 0.1
    output_dir: str = "runs/default"

    def validate(self) -> None:
        self.model.validate()
        self.optimizer.validate()
        self.data.validate()
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative int, got {self.seed!r}")
        if self.epsilon_band < 0 or self.tau_init < 0:
            raise ConfigError("epsilon_band and tau_init must be >= 0")
        levels = len(self.model.channels)
        if self.data.image_size % (2**levels):
            raise ConfigError(f"data.image_size {self.data.image_size} must be divisible by 2**{levels}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects the numbers (``output_dir`` excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        try:
            cfg = _build(cls, raw, "")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {unknown}")
    kwargs = {}
    for name, value in raw.items():
        sub = {"model": ModelConfig, "schedule": PruneSchedule, "optimizer": OptimizerConfig, "data": DataConfig}
        if cls is RunConfig and name in sub:
            kwargs[name] = _build(sub[name], value, name)
        else:
            kwargs[name] = _coerce(value, fields[name], f"{where}.{name}".lstrip("."))
    return cls(**kwargs)


def _coerce(value, f: dataclasses.Field, where: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if kind == "list[int]":
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"{where} must be a list of integers")
        return list(value)
    return value
