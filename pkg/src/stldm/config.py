"""Experiment configuration: one JSON document with fixed sections.

Unknown keys anywhere are hard errors so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .losses import LossWeights
from .networks import ModelDims
from .schedule import CfgConfig, build_schedule

SEVIR_THRESHOLDS = (16.0, 74.0, 133.0, 160.0, 181.0, 219.0)
HKO7_THRESHOLDS = (84.0, 117.0, 140.0, 158.0, 185.0)
METEONET_THRESHOLDS = (12.0, 18.0, 24.0, 32.0)
SYNTHETIC_THRESHOLDS = (32.0, 64.0, 128.0, 192.0)
THRESHOLD_PRESETS = {
    "sevir": SEVIR_THRESHOLDS,
    "hko7": HKO7_THRESHOLDS,
    "meteonet": METEONET_THRESHOLDS,
    "synthetic": SYNTHETIC_THRESHOLDS,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def build(self):
        return build_schedule(self.T, self.beta_start, self.beta_end, self.kind)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    seed: int = 0
    strategy: str = "C"
    vae_stage_steps: int = 2000
    translator_stage_steps: int = 2000
    grad_clip: float = 1.0
    validation_every: int = 500
    validation_events: int = 32
    checkpoint_every: int = 1000
    fixed_translator_sigma: bool = False
    detach_diffusion_target: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.strategy not in ("A", "B", "C"):
            raise ConfigError(f"strategy must be A, B or C, got {self.strategy!r}")


@dataclass(frozen=True)
class DataConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_range: tuple = (0, 8000)
    val_range: tuple = (8000, 8500)
    test_range: tuple = (8500, 9000)


@dataclass(frozen=True)
class EvalConfig:
    members: int = 10
    ddim_steps: int = 20
    thresholds: tuple = SYNTHETIC_THRESHOLDS
    pools: tuple = (1, 4, 16)
    test_events: int = 500
    data_range: float = 255.0


@dataclass(frozen=True)
class Config:
    dims: ModelDims = field(default_factory=ModelDims)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    cfg: CfgConfig = field(default_factory=CfgConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        d, s = self.dims, self.data.synth
        if (d.H, d.W, d.M, d.N) != (s.height, s.width, s.input_frames, s.output_frames):
            raise ConfigError(f"model dims {d.M}+{d.N} frames of {d.H}x{d.W} disagree with data "
                              f"{s.input_frames}+{s.output_frames} frames of {s.height}x{s.width}")

    def replace(self, **sections) -> "Config":
        """``cfg.replace(train={"seed": 3})`` merges per-section overrides."""
        merged = to_dict(self)
        for name, patch in sections.items():
            if name not in merged:
                raise ConfigError(f"unknown section {name!r}")
            merged[name] = _deep_merge(merged[name], patch)
        return from_dict(merged)


def full_scale_config() -> Config:
    """Full-scale hyperparameters: 128x128 frames, 200k steps, 2k warmup, peak lr 1e-4."""
    return Config(
        dims=ModelDims(M=13, N=12, H=128, W=128, Cz=32, base_channels=64, depth=3, patch0=8,
                       vae_channels=32, translator_channels=256, channel_mult=(1, 2, 4)),
        train=TrainConfig(total_steps=200_000, batch_size=4, peak_lr=1e-4, warmup_steps=2000),
        data=DataConfig(synth=SynthConfig(height=128, width=128, input_frames=13, output_frames=12)),
        eval=EvalConfig(thresholds=SEVIR_THRESHOLDS),
    )


def _deep_merge(base, patch):
    if isinstance(base, dict) and isinstance(patch, dict):
        out = dict(base)
        for k, v in patch.items():
            if k not in out:
                raise ConfigError(f"unknown key {k!r}")
            out[k] = _deep_merge(out[k], v)
        return out
    return patch


def _build(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        f = known[name]
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_SECTIONS = {
    "dims": ModelDims, "schedule": ScheduleConfig, "loss_weights": LossWeights,
    "train": TrainConfig, "cfg": CfgConfig, "data": DataConfig, "eval": EvalConfig,
}
_NESTED = {(DataConfig, "synth"): SynthConfig}
_NESTED.update({(Config, k): v for k, v in _SECTIONS.items()})


def from_dict(values: dict) -> Config:
    cfg = _build(Config, values, "config")
    seed = os.environ.get("STLDM_SEED")
    if seed is not None:
        try:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=int(seed)))
        except ValueError as exc:
            raise ConfigError(f"STLDM_SEED must be an integer, got {seed!r}") from exc
    return cfg


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path: str | os.PathLike | None) -> Config:
    if path is None:
        return from_dict({})
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(values)


def dump_config(cfg: Config, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
