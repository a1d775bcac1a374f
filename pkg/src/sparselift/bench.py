"""Complexity and throughput benchmarking.

PPS (poses per second) counts output poses the sliding-window pipeline can
emit per wall-clock second: one forward pass serves ``stride_out`` output
frames of a video at the stated frame rate, so
PPS = forwards/sec * stride_out. The 2D detector is outside this package
and excluded from all numbers. Measurement protocol: fixed warm-up
forwards, then timed single-window forwards for a wall-clock budget;
wall-clock fields are the only non-deterministic entries in the report.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .network import FLOPS_CONVENTION, UpliftModel, flops_breakdown, flops_estimate
from .sequencing import token_layout


@dataclass
class BenchReport:
    flops: int
    flops_breakdown: dict
    flops_convention: str
    forwards_per_sec: float
    poses_per_sec: float
    frame_rate: float
    realtime_factor: float
    median_ms: float
    p95_ms: float
    n_forwards: int
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def bench_throughput(
    model: UpliftModel,
    stride_in: int | None = None,
    duration_s: float = 2.0,
    frame_rate: float = 50.0,
    warmup: int = 5,
    batch_size: int = 1,
) -> BenchReport:
    """Measure single-window forward throughput and derive PPS."""
    config = model.config
    schedule = config.schedule
    if stride_in is not None:
        schedule = schedule.with_stride_in(stride_in)
        from dataclasses import replace
        config = replace(config, schedule=schedule)
        config.validate()
    layout = token_layout(schedule)
    dtype = next(model.parameters()).dtype
    x = torch.randn(batch_size, layout.n_in, config.joints, 2, dtype=dtype)
    was_training = model.training
    model.eval()
    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model(x, layout)
        deadline = time.perf_counter() + duration_s
        while time.perf_counter() < deadline:
            start = time.perf_counter()
            model(x, layout)
            times.append(time.perf_counter() - start)
    model.train(was_training)
    times_ms = 1000.0 * np.asarray(times) / batch_size
    per_forward = float(np.median(times_ms)) / 1000.0
    forwards_per_sec = 1.0 / per_forward
    poses_per_sec = forwards_per_sec * schedule.stride_out
    return BenchReport(
        flops=flops_estimate(config),
        flops_breakdown=flops_breakdown(config),
        flops_convention=FLOPS_CONVENTION,
        forwards_per_sec=forwards_per_sec,
        poses_per_sec=poses_per_sec,
        frame_rate=frame_rate,
        realtime_factor=poses_per_sec / frame_rate,
        median_ms=float(np.median(times_ms)),
        p95_ms=float(np.percentile(times_ms, 95)),
        n_forwards=len(times) * batch_size,
        config=config.to_dict(),
    )


BENCH_CSV_COLUMNS = ("flops", "forwards_per_sec", "poses_per_sec", "frame_rate",
                     "realtime_factor", "median_ms", "p95_ms", "n_forwards")


def write_bench_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_CSV_COLUMNS)
        writer.writerow([getattr(report, c) for c in BENCH_CSV_COLUMNS])


def write_bench_json(report: BenchReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
