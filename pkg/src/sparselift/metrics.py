"""Evaluation metrics for 3D pose estimates.

All position metrics are computed on root-relative poses and reported in
millimeters; PCK/AUC in percent. Every function accepts a single pose
(J, 3) or a sequence (T, J, 3); sequence values are per-frame results
averaged over frames.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import AlignmentDegenerateError, InvalidPoseError, SparseliftError
from .geometry import Skeleton, pose_velocity, root_relative

PCK_THRESHOLD_MM = 150.0
# 5, 10, ..., 150 mm; the conventional 30-threshold AUC grid.
AUC_THRESHOLDS_MM = tuple(float(t) for t in range(5, 151, 5))
VELOCITY_BIN_WIDTH = 0.1


def _as_frames(pred, gt, skeleton: Skeleton):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidPoseError(f"shape mismatch: prediction {pred.shape} vs target {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3 or pred.shape[1] != skeleton.joint_count or pred.shape[2] != 3:
        raise InvalidPoseError(f"expected (T, {skeleton.joint_count}, 3) poses, got {pred.shape}")
    return pred, gt


def per_frame_mpjpe(pred, gt, skeleton: Skeleton) -> np.ndarray:
    """Root-relative mean per-joint position error for every frame (mm)."""
    pred, gt = _as_frames(pred, gt, skeleton)
    diff = root_relative(pred, skeleton) - root_relative(gt, skeleton)
    return np.linalg.norm(diff, axis=-1).mean(axis=-1)


def mpjpe(pred, gt, skeleton: Skeleton) -> float:
    """Root-relative mean per-joint position error in mm."""
    return float(per_frame_mpjpe(pred, gt, skeleton).mean())


def n_mpjpe(pred, gt, skeleton: Skeleton) -> float:
    """MPJPE after the least-squares optimal scaling of the prediction.

    The scalar <pred, gt> / <pred, pred> (on root-relative poses, per
    frame) minimizes the squared alignment error. A zero-norm prediction
    falls back to the plain MPJPE.
    """
    pred, gt = _as_frames(pred, gt, skeleton)
    p = root_relative(pred, skeleton)
    g = root_relative(gt, skeleton)
    denom = (p * p).sum(axis=(1, 2), keepdims=True)
    num = (p * g).sum(axis=(1, 2), keepdims=True)
    scale = np.divide(num, denom, out=np.ones_like(num), where=denom > 0)
    return float(np.linalg.norm(scale * p - g, axis=-1).mean())


def _procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align one (J, 3) prediction onto its target.

    Centers both clouds, finds the Frobenius-optimal rotation via SVD of
    the cross-covariance (with determinant-sign correction to exclude
    reflections), then applies the optimal scale and translation.
    """
    mu_g = gt.mean(axis=0)
    mu_p = pred.mean(axis=0)
    g0 = gt - mu_g
    p0 = pred - mu_p
    norm_g = np.linalg.norm(g0)
    norm_p = np.linalg.norm(p0)
    if norm_g == 0 or norm_p == 0:
        raise AlignmentDegenerateError("all joints coincide; nothing to align")
    g0 = g0 / norm_g
    p0 = p0 / norm_p
    cov = g0.T @ p0
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12:
        raise AlignmentDegenerateError("joint cloud is rank-deficient (rank < 2)")
    v = vt.T
    if np.linalg.det(v @ u.T) < 0:
        v = v.copy()
        v[:, -1] *= -1
        s = s.copy()
        s[-1] *= -1
    rot = v @ u.T
    scale = s.sum() * norm_g / norm_p
    trans = mu_g - scale * (mu_p @ rot)
    return scale * (pred @ rot) + trans


def p_mpjpe(pred, gt, skeleton: Skeleton) -> float:
    """MPJPE after per-frame Procrustes (rotation+scale+translation) alignment."""
    pred, gt = _as_frames(pred, gt, skeleton)
    errs = []
    for t in range(pred.shape[0]):
        aligned = _procrustes_align(pred[t], gt[t])
        errs.append(np.linalg.norm(aligned - gt[t], axis=-1).mean())
    return float(np.mean(errs))


def _nonroot_errors(pred, gt, skeleton: Skeleton) -> np.ndarray:
    """Per-(frame, joint) root-relative errors, root excluded.

    The root joint is error-free by construction in root-relative space, so
    counting it would inflate PCK/AUC with guaranteed hits.
    """
    pred, gt = _as_frames(pred, gt, skeleton)
    diff = root_relative(pred, skeleton) - root_relative(gt, skeleton)
    keep = [j for j in range(skeleton.joint_count) if j != skeleton.root]
    if not keep:
        raise SparseliftError("PCK/AUC need at least one non-root joint")
    return np.linalg.norm(diff[:, keep], axis=-1)


def pck(pred, gt, skeleton: Skeleton, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of non-root (frame, joint) pairs with root-relative error < threshold."""
    errors = _nonroot_errors(pred, gt, skeleton)
    return 100.0 * int((errors < threshold_mm).sum()) / errors.size


def auc(pred, gt, skeleton: Skeleton, thresholds=AUC_THRESHOLDS_MM) -> float:
    """Mean PCK over a threshold sweep (default 5..150 mm in 5 mm steps)."""
    if len(thresholds) == 0:
        raise SparseliftError("auc needs at least one threshold")
    errors = _nonroot_errors(pred, gt, skeleton)
    values = [100.0 * int((errors < t).sum()) / errors.size for t in thresholds]
    return sum(values) / len(values)


@dataclass(frozen=True)
class VelocityBin:
    """One row of the velocity-binned error histogram."""

    low: float
    high: float
    mean_mpjpe: float
    count: int
    cdf: float


def mpjpe_by_velocity(
    pred,
    gt,
    skeleton: Skeleton,
    frame_rate: float,
    bin_width: float = VELOCITY_BIN_WIDTH,
) -> list[VelocityBin]:
    """Bucket per-frame MPJPE by ground-truth pose velocity.

    Returns populated bins only, sorted by velocity; ``cdf`` is the
    cumulative fraction of frames with velocity below the bin's upper edge.
    """
    if bin_width <= 0:
        raise SparseliftError("bin_width must be positive")
    pred, gt = _as_frames(pred, gt, skeleton)
    velocities = pose_velocity(gt, skeleton, frame_rate)
    errors = per_frame_mpjpe(pred, gt, skeleton)
    return velocity_histogram(velocities, errors, bin_width)


def velocity_histogram(velocities: np.ndarray, errors: np.ndarray, bin_width: float) -> list[VelocityBin]:
    """Histogram per-frame errors over velocity bins of fixed width."""
    velocities = np.asarray(velocities, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if velocities.shape != errors.shape:
        raise SparseliftError("velocities and errors must align one per frame")
    indices = np.floor(velocities / bin_width).astype(np.int64)
    total = len(velocities)
    bins: list[VelocityBin] = []
    cumulative = 0
    for idx in np.unique(indices):
        mask = indices == idx
        count = int(mask.sum())
        cumulative += count
        bins.append(VelocityBin(
            low=float(idx * bin_width),
            high=float((idx + 1) * bin_width),
            mean_mpjpe=float(errors[mask].mean()),
            count=count,
            cdf=cumulative / total,
        ))
    return bins


@dataclass
class MetricsReport:
    """All evaluation metrics for one prediction/ground-truth pairing."""

    mpjpe_mm: float
    n_mpjpe_mm: float
    p_mpjpe_mm: float
    pck_percent: float
    auc_percent: float
    per_frame_errors: list[float]
    velocity_histogram: list[VelocityBin]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        hist = [VelocityBin(**row) for row in raw["velocity_histogram"]]
        return cls(
            mpjpe_mm=raw["mpjpe_mm"],
            n_mpjpe_mm=raw["n_mpjpe_mm"],
            p_mpjpe_mm=raw["p_mpjpe_mm"],
            pck_percent=raw["pck_percent"],
            auc_percent=raw["auc_percent"],
            per_frame_errors=list(raw["per_frame_errors"]),
            velocity_histogram=hist,
        )


def compute_report(
    pred,
    gt,
    skeleton: Skeleton,
    frame_rate: float,
    bin_width: float = VELOCITY_BIN_WIDTH,
) -> MetricsReport:
    """Evaluate the full metric suite on one sequence pair."""
    pred, gt = _as_frames(pred, gt, skeleton)
    if pred.shape[0] >= 2:
        hist = mpjpe_by_velocity(pred, gt, skeleton, frame_rate, bin_width)
    else:
        hist = []
    return MetricsReport(
        mpjpe_mm=mpjpe(pred, gt, skeleton),
        n_mpjpe_mm=n_mpjpe(pred, gt, skeleton),
        p_mpjpe_mm=p_mpjpe(pred, gt, skeleton),
        pck_percent=pck(pred, gt, skeleton),
        auc_percent=auc(pred, gt, skeleton),
        per_frame_errors=[float(e) for e in per_frame_mpjpe(pred, gt, skeleton)],
        velocity_histogram=hist,
    )


def write_report_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def read_report_json(path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))


FRAME_CSV_COLUMNS = ("frame", "mpjpe_mm")
HISTOGRAM_CSV_COLUMNS = ("bin_low", "bin_high", "mean_mpjpe", "count", "cdf")
SUMMARY_CSV_COLUMNS = ("mpjpe_mm", "n_mpjpe_mm", "p_mpjpe_mm", "pck_percent", "auc_percent")


def write_report_csv(report: MetricsReport, summary_path, frames_path=None, histogram_path=None) -> None:
    """Emit the report as CSV: one summary row, per-frame rows, histogram rows."""
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_CSV_COLUMNS)
        writer.writerow([repr(getattr(report, col)) for col in SUMMARY_CSV_COLUMNS])
    if frames_path is not None:
        with open(frames_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(FRAME_CSV_COLUMNS)
            for i, err in enumerate(report.per_frame_errors):
                writer.writerow([i, repr(err)])
    if histogram_path is not None:
        with open(histogram_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTOGRAM_CSV_COLUMNS)
            for b in report.velocity_histogram:
                writer.writerow([repr(b.low), repr(b.high), repr(b.mean_mpjpe), b.count, repr(b.cdf)])
