"""Velocity-driven adaptive input stride.

A video is processed with a long (efficient) input stride by default; when
the observed root-relative pose velocity exceeds a threshold, subsequent
windows switch to a short stride for precision, and switch back only after
the velocity has stayed below the threshold for a cooldown span of frames.

State machine (one velocity sample per frame, consumed in frame order):
  * velocity > threshold  -> fast mode, reset the cooldown counter
  * velocity <= threshold -> count the frame; after ``cooldown_frames``
    consecutive quiet frames the controller returns to slow mode.
The stride chosen for a window applies to the frames it is responsible
for, i.e. the trace changes value only at window-center boundaries. With
an oracle velocity source the velocities up to and including the current
center are consumed before the window is predicted; with self-measured
velocities (derived from the model's own center predictions) the state
naturally lags by one center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SparseliftError
from .geometry import Skeleton, bilinear_upsample, root_relative
from .inference import predict_centers
from .network import UpliftModel
from .sequencing import sliding_plan


@dataclass(frozen=True)
class AdaptiveConfig:
    slow_stride: int = 20
    fast_stride: int = 5
    velocity_threshold_mps: float = 0.5
    cooldown_frames: int = 25

    def validate(self, stride_out: int) -> None:
        # Equality is allowed: it degenerates to plain fixed-stride inference.
        if self.fast_stride > self.slow_stride:
            raise SparseliftError("fast_stride must not exceed slow_stride")
        for s in (self.slow_stride, self.fast_stride):
            if s % stride_out != 0:
                raise SparseliftError(f"stride {s} is not a multiple of output stride {stride_out}")
        if not self.velocity_threshold_mps > 0:
            raise SparseliftError("velocity threshold must be positive")
        if self.cooldown_frames < 1:
            raise SparseliftError("cooldown must be at least one frame")


class StrideController:
    """Pure threshold/cooldown state machine over a per-frame velocity stream."""

    def __init__(self, cfg: AdaptiveConfig):
        self.cfg = cfg
        self.fast = False
        self.quiet_frames = 0

    @property
    def stride(self) -> int:
        return self.cfg.fast_stride if self.fast else self.cfg.slow_stride

    def consume(self, velocity: float) -> None:
        if velocity > self.cfg.velocity_threshold_mps:
            self.fast = True
            self.quiet_frames = 0
        else:
            self.quiet_frames += 1
            if self.fast and self.quiet_frames >= self.cfg.cooldown_frames:
                self.fast = False


@dataclass
class AdaptiveResult:
    poses: np.ndarray  # (T, J, 3) dense prediction
    stride_trace: np.ndarray  # (T,) input stride used per frame
    center_strides: np.ndarray  # stride per window center
    switch_frames: list[int] = field(default_factory=list)


def _plan_center_strides(centers, video_len, cfg: AdaptiveConfig, oracle_velocity):
    """Decide every center's stride upfront from an oracle velocity stream."""
    controller = StrideController(cfg)
    strides = np.empty(len(centers), dtype=np.int64)
    switch_frames = []
    consumed = 0
    for i, center in enumerate(centers):
        for f in range(consumed, int(center) + 1):
            before = controller.stride
            controller.consume(float(oracle_velocity[f]))
            if controller.stride != before:
                switch_frames.append(f)
        consumed = int(center) + 1
        strides[i] = controller.stride
    return strides, switch_frames


def adaptive_infer(
    model: UpliftModel,
    poses_2d: np.ndarray,
    cfg: AdaptiveConfig,
    skeleton: Skeleton,
    frame_rate: float,
    oracle_velocity: np.ndarray | None = None,
) -> AdaptiveResult:
    """Sliding inference with online stride switching.

    ``oracle_velocity`` (per-frame m/s) replaces the self-measured velocity
    source; it is meant for controller tests and scripted demonstrations.
    When the stride sequence is decidable ahead of prediction (oracle
    source, equal strides, or a non-finite threshold) windows are batched
    in contiguous equal-stride runs, so the degenerate configurations are
    byte-identical to plain fixed-stride inference.
    """
    schedule = model.config.schedule
    cfg.validate(schedule.stride_out)
    video_len = len(poses_2d)
    centers = sliding_plan(video_len, schedule)
    if oracle_velocity is not None and len(oracle_velocity) != video_len:
        raise SparseliftError("oracle velocity must provide one value per frame")

    s_out = schedule.stride_out
    preds = np.empty((len(centers), model.config.joints, 3))
    degenerate = (cfg.fast_stride == cfg.slow_stride
                  or not math.isfinite(cfg.velocity_threshold_mps))
    if oracle_velocity is not None:
        center_strides, switch_frames = _plan_center_strides(
            centers, video_len, cfg, oracle_velocity)
    elif degenerate:
        center_strides = np.full(len(centers), cfg.slow_stride, dtype=np.int64)
        switch_frames = []
    else:
        center_strides, switch_frames = _self_measured_loop(
            model, poses_2d, centers, cfg, skeleton, frame_rate, preds)

    if oracle_velocity is not None or degenerate:
        # Batch contiguous same-stride runs of centers.
        start = 0
        for i in range(1, len(centers) + 1):
            if i == len(centers) or center_strides[i] != center_strides[start]:
                run = centers[start:i]
                preds[start:i] = predict_centers(
                    model, poses_2d, run,
                    schedule.with_stride_in(int(center_strides[start])), skeleton)
                start = i

    trace = np.empty(video_len, dtype=np.int64)
    for i, center in enumerate(centers):
        trace[int(center) : min(int(center) + s_out, video_len)] = center_strides[i]
    dense = bilinear_upsample(preds, centers, video_len) if s_out > 1 else preds
    return AdaptiveResult(poses=dense, stride_trace=trace,
                          center_strides=center_strides, switch_frames=switch_frames)


def _self_measured_loop(model, poses_2d, centers, cfg, skeleton, frame_rate, preds):
    """Sequential center-by-center inference driven by predicted velocities."""
    schedule = model.config.schedule
    s_out = schedule.stride_out
    controller = StrideController(cfg)
    center_strides = np.empty(len(centers), dtype=np.int64)
    switch_frames = []
    consumed = 0
    prev_rel = None
    for i, center in enumerate(centers):
        center = int(center)
        stride = controller.stride
        center_strides[i] = stride
        preds[i] = predict_centers(
            model, poses_2d, [center], schedule.with_stride_in(stride), skeleton)[0]
        rel = root_relative(preds[i], skeleton)
        if prev_rel is not None:
            # Center predictions are s_out frames apart; velocity in m/s.
            step = np.linalg.norm(rel - prev_rel, axis=-1).mean()
            velocity = step * frame_rate / s_out / 1000.0
            before = controller.stride
            for f in range(consumed, center + 1):
                controller.consume(velocity)
            if controller.stride != before:
                switch_frames.append(center)
        consumed = center + 1
        prev_rel = rel
    return center_strides, switch_frames
