"""Run configuration: one JSON document with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

from tfmcl.augment import AugPolicy
from tfmcl.data import SplitSpec
from tfmcl.errors import ConfigError, TFMCLError
from tfmcl.loss import LossWeights
from tfmcl.model import EncoderConfig
from tfmcl.train import TrainConfig

SECTIONS = ("data", "encoder", "loss", "augment", "train", "eval", "seed")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic generator parameters plus split and preprocessing options."""

    n_subjects: int = 20
    windows_per_subject: int = 20
    n_channels: int = 8
    window_len: int = 512
    fs_hz: float = 256.0
    class_band_hz: Tuple[float, float] = (8.0, 12.0)
    power_ratio: float = 3.0
    noise_sigma: float = 1.0
    split_strategy: str = "subject_wise"
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    pretrain_on: str = "train"
    bandpass_hz: Optional[Tuple[float, float]] = None
    notch_hz: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        for k in ("class_band_hz", "split_fractions", "bandpass_hz", "notch_hz"):
            v = getattr(self, k)
            if v is not None:
                object.__setattr__(self, k, tuple(v))
        if self.pretrain_on not in ("train", "all"):
            raise ConfigError("data.pretrain_on must be 'train' or 'all'")
        if self.notch_hz is not None and self.bandpass_hz is None:
            raise ConfigError("data.notch_hz requires data.bandpass_hz")


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 128
    epochs_pretrain: int = 100
    epochs_finetune: int = 200
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    enable_frl: bool = True
    enable_tfdl: bool = True


@dataclass(frozen=True)
class EvalConfig:
    partition: str = "test"

    def __post_init__(self):
        if self.partition not in ("train", "val", "test", "all"):
            raise ConfigError("eval.partition must be train, val, test or all")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugPolicy = field(default_factory=AugPolicy)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(loss=self.loss, augment=self.augment, encoder=self.encoder,
                           seed=self.seed, **asdict(self.train))

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.data.split_strategy, self.data.split_fractions, self.seed)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TFMCLError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    built = {}
    for name, cls in (("data", DataConfig), ("encoder", EncoderConfig), ("loss", LossWeights),
                      ("augment", AugPolicy), ("train", TrainSection), ("eval", EvalConfig)):
        if name in d:
            built[name] = _build(cls, d[name], name)
    if "seed" in d:
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        built["seed"] = d["seed"]
    cfg = RunConfig(**built)
    try:
        cfg.train_config()
        cfg.split_spec()
    except TFMCLError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(d)
