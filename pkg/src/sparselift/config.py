"""Run configuration files (YAML) and CLI overrides.

Schema (all sections optional unless a command needs them):

    model:
      joints: 17
      window: 81            # N, odd
      stride_in: 10         # default/eval input stride
      stride_out: 2
      d_joint: 32
      d_temp: 348
      blocks_spatial: 4
      blocks_temporal: 4
      blocks_strided: 3
      heads_spatial: 4
      heads_temporal: 6
      mlp_ratio: 2
      drop_path_rate: 0.1
      reduction_strides: [4, 4, 3]    # optional, auto-derived otherwise
      duta_enabled: true
      spatial_enabled: true
      temporal_enabled: true
      strided_enabled: true
    train:
      strides_in: [4, 10, 20]
      epochs: 120
      steps_per_epoch: 200
      batch_size: 512
      lr0: 4.0e-5
      lr_decay: 0.99
      wd0: 4.0e-6
      alpha_seq: 0.5
      alpha_center: 0.5
      ema_decay: 0.999
      ema_enabled: true
      wba_enabled: true
      flip_tta_enabled: true
      seed: 0
    adaptive:
      slow_stride: 20
      fast_stride: 5
      velocity_threshold_mps: 0.5
      cooldown_frames: 25
    synth:
      kinds: [sinusoidal-limbs]
      sequences: 4
      duration: 500
      frame_rate: 50.0
      amplitude_mm: 100.0
      frequency_hz: 1.0
      noise_sigma: 0.0
      noise_dropout: 0.0
    bench:
      duration_s: 2.0
      frame_rate: 50.0
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

import yaml

from .adaptive import AdaptiveConfig
from .errors import ConfigError
from .network import ModelConfig
from .sequencing import StrideSchedule
from .training import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig | None
    train: TrainConfig | None
    adaptive: AdaptiveConfig
    synth: dict
    bench: dict
    raw: dict


def _build_model_config(section: dict) -> ModelConfig:
    section = dict(section)
    try:
        schedule = StrideSchedule(
            window=int(section.pop("window")),
            stride_in=int(section.pop("stride_in")),
            stride_out=int(section.pop("stride_out")),
        )
        joints = int(section.pop("joints"))
    except KeyError as exc:
        raise ConfigError(f"model section is missing key {exc}") from exc
    allowed = {f.name for f in fields(ModelConfig)} - {"joints", "schedule"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    if "reduction_strides" in section and section["reduction_strides"] is not None:
        section["reduction_strides"] = tuple(int(r) for r in section["reduction_strides"])
    return ModelConfig(joints=joints, schedule=schedule, **section)


def _build_train_config(section: dict) -> TrainConfig:
    section = dict(section)
    try:
        strides = tuple(int(s) for s in section.pop("strides_in"))
    except KeyError as exc:
        raise ConfigError(f"train section is missing key {exc}") from exc
    allowed = {f.name for f in fields(TrainConfig)} - {"strides_in"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(strides_in=strides, **section)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML run configuration, applying flat CLI overrides.

    Supported overrides: seed, stride_in, stride_out, window (applied to
    the model schedule and, where sensible, the train section).
    """
    if not os.path.exists(path):
        raise ConfigError(f"configuration file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"configuration root must be a mapping: {path}")
    overrides = overrides or {}

    model = None
    if "model" in raw:
        section = dict(raw["model"])
        for key in ("window", "stride_in", "stride_out"):
            if overrides.get(key) is not None:
                section[key] = overrides[key]
        model = _build_model_config(section)
    train = None
    if "train" in raw:
        section = dict(raw["train"])
        if overrides.get("seed") is not None:
            section["seed"] = overrides["seed"]
        train = _build_train_config(section)
    adaptive_raw = raw.get("adaptive", {})
    allowed = {f.name for f in fields(AdaptiveConfig)}
    unknown = set(adaptive_raw) - allowed
    if unknown:
        raise ConfigError(f"unknown adaptive config keys: {sorted(unknown)}")
    adaptive = AdaptiveConfig(**adaptive_raw)
    return RunConfig(model=model, train=train, adaptive=adaptive,
                     synth=dict(raw.get("synth", {})), bench=dict(raw.get("bench", {})),
                     raw=raw)
