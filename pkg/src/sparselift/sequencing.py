"""Key-frame grids, token layouts and sliding-window plans.

A window of length N (odd) around a center frame t covers frames
t-n .. t+n. Input 2D poses are sampled on the window-relative grid
{0, s_in, 2*s_in, ...}; 3D outputs are produced on {0, s_out, ..., N-1}.
Since s_in is a multiple of s_out, every input position is also an output
position ("pose slot"); the remaining output positions are filled with the
learnable upsampling token ("upsample slots").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError


@dataclass(frozen=True)
class StrideSchedule:
    """Window geometry: receptive field N, input stride, output stride."""

    window: int
    stride_in: int
    stride_out: int

    @property
    def half(self) -> int:
        return (self.window - 1) // 2

    @property
    def n_out(self) -> int:
        return (self.window - 1) // self.stride_out + 1

    def with_stride_in(self, stride_in: int) -> "StrideSchedule":
        return StrideSchedule(self.window, stride_in, self.stride_out)

    def require_valid(self) -> None:
        problems = validate_schedule(self)
        if problems:
            raise ScheduleError("; ".join(problems))


def validate_schedule(schedule: StrideSchedule) -> list[str]:
    """Check all StrideSchedule invariants; returns violations (empty = ok)."""
    problems = []
    n, s_in, s_out = schedule.window, schedule.stride_in, schedule.stride_out
    if n < 1:
        problems.append(f"window length must be >= 1, got {n}")
    if n % 2 == 0:
        problems.append(f"window length must be odd, got {n}")
    if s_out < 1:
        problems.append(f"output stride must be >= 1, got {s_out}")
    if s_in < 1:
        problems.append(f"input stride must be >= 1, got {s_in}")
    if s_out >= 1 and s_in >= 1 and s_in % s_out != 0:
        problems.append(f"input stride {s_in} must be a multiple of output stride {s_out}")
    if n >= 1 and s_out >= 1 and (n - 1) % s_out != 0:
        problems.append(f"window length minus one ({n - 1}) must be divisible by output stride {s_out}")
    if n >= 1 and n % 2 == 1 and s_out >= 1 and (n - 1) % s_out == 0 and ((n - 1) // 2) % s_out != 0:
        # Keeps the window center on the output grid, so the refined center
        # prediction lines up with an output slot.
        problems.append(f"half window {(n - 1) // 2} must be divisible by output stride {s_out}")
    return problems


@dataclass(frozen=True)
class TokenLayout:
    """Assignment of the N_out output slots to pose vs. upsampling tokens.

    ``input_offsets`` are the window-relative frame offsets carrying 2D
    input poses; ``pose_slots`` are the same positions expressed as output
    slot indices. ``upsample_slots`` is the complement.
    """

    n_out: int
    input_offsets: tuple[int, ...]
    pose_slots: tuple[int, ...]
    upsample_slots: tuple[int, ...]

    @property
    def n_in(self) -> int:
        return len(self.pose_slots)

    @property
    def center_slot(self) -> int:
        return (self.n_out - 1) // 2


def token_layout(schedule: StrideSchedule) -> TokenLayout:
    """Derive the pose/upsampling token placement for a schedule."""
    schedule.require_valid()
    n, s_in, s_out = schedule.window, schedule.stride_in, schedule.stride_out
    input_offsets = tuple(range(0, n, s_in))
    pose_slots = tuple(off // s_out for off in input_offsets)
    pose_set = set(pose_slots)
    upsample_slots = tuple(i for i in range(schedule.n_out) if i not in pose_set)
    return TokenLayout(
        n_out=schedule.n_out,
        input_offsets=input_offsets,
        pose_slots=pose_slots,
        upsample_slots=upsample_slots,
    )


@dataclass(frozen=True)
class WindowPlan:
    """Absolute frame indices feeding one window, clamped at video borders."""

    center: int
    input_indices: np.ndarray
    output_indices: np.ndarray
    clamped_left: bool
    clamped_right: bool


def window_plan(center: int, video_len: int, schedule: StrideSchedule) -> WindowPlan:
    """Absolute input/output frame indices for the window centered at ``center``.

    Indices outside [0, video_len) are clamped to the nearest valid frame
    (edge replication).
    """
    schedule.require_valid()
    if not 0 <= center < video_len:
        raise ScheduleError(f"center {center} outside video of length {video_len}")
    layout = token_layout(schedule)
    start = center - schedule.half
    inputs = start + np.asarray(layout.input_offsets, dtype=np.int64)
    outputs = start + np.arange(0, schedule.window, schedule.stride_out, dtype=np.int64)
    return WindowPlan(
        center=center,
        input_indices=np.clip(inputs, 0, video_len - 1),
        output_indices=np.clip(outputs, 0, video_len - 1),
        clamped_left=start < 0,
        clamped_right=center + schedule.half > video_len - 1,
    )


def sliding_plan(video_len: int, schedule: StrideSchedule) -> np.ndarray:
    """Window centers for inference: every s_out-th frame from the start."""
    if video_len < 1:
        raise ScheduleError(f"video length must be >= 1, got {video_len}")
    return np.arange(0, video_len, schedule.stride_out, dtype=np.int64)
