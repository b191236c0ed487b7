"""Run configuration: one YAML/JSON document, strict keys, explicit defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .tensor import ConfigError
from .training import LossConfig, TrainConfig


@dataclass
class DataSection:
    train: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    channels: Optional[list] = None   # subset of manifest channels, in order


@dataclass
class ModelSection:
    d_model: int = 128
    d_ff: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 1
    fusion_mode: str = "multichannel"
    anchor_classes: Optional[list] = None
    channel_norm: str = "batch"
    channel_activation: str = "softsign"
    channel_scale: bool = False
    word_norm: str = "none"
    word_activation: str = "none"
    word_scale: bool = False
    max_positions: int = 512
    # only consulted when no corpus is given (e.g. gradcheck)
    channel_dims: Optional[list] = None
    vocab_size: Optional[int] = None


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-8
    weight_decay: float = 1e-3


@dataclass
class ScheduleSection:
    batch_size: int = 32
    max_steps: int = 3000
    eval_every: int = 100
    patience: int = 8
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    early_stop: int = 25
    log_every: int = 10
    clip_grad_norm: Optional[float] = None


@dataclass
class DecodingSection:
    max_len: int = 60
    widths: list = field(default_factory=lambda: list(range(11)))
    alphas: list = field(default_factory=lambda: list(range(6)))


@dataclass
class RunConfig:
    seed: int = 0
    precision: int = 32
    out: str = "run"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    decoding: DecodingSection = field(default_factory=DecodingSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def train_config(self) -> TrainConfig:
        s = self.schedule
        return TrainConfig(batch_size=s.batch_size, max_steps=s.max_steps, eval_every=s.eval_every,
                           patience=s.patience, lr_factor=s.lr_factor, min_lr=s.min_lr,
                           early_stop=s.early_stop, log_every=s.log_every,
                           max_decode_len=self.decoding.max_len, clip_grad_norm=s.clip_grad_norm,
                           seed=self.seed)


_SECTIONS = {"data": DataSection, "model": ModelSection, "loss": LossConfig,
             "optimizer": OptimizerSection, "schedule": ScheduleSection,
             "decoding": DecodingSection}


def _section(cls, raw, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"section {name!r}: {e}") from None


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    top = {"seed", "precision", "out"} | set(_SECTIONS)
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    kwargs = {k: _section(cls, raw.get(k), k) for k, cls in _SECTIONS.items()}
    cfg = RunConfig(seed=int(raw.get("seed", 0)), precision=int(raw.get("precision", 32)),
                    out=str(raw.get("out", "run")), base_dir=Path(base_dir), **kwargs)
    if cfg.precision not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    cfg.train_config()
    for w in cfg.decoding.widths:
        if not 0 <= int(w) <= 10:
            raise ConfigError(f"beam width {w} outside 0..10")
    for a in cfg.decoding.alphas:
        if not 0 <= float(a) <= 5:
            raise ConfigError(f"alpha {a} outside 0..5")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return config_from_dict(raw, path.parent)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
