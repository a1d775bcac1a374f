"""Paired 2D/3D pose dataset files.

The on-disk format is line-delimited JSON: the first line is a header
object (format version, skeleton, frame rate, camera list, optional noise
tag), every following line one sequence record with paired per-frame 2D
and 3D poses. Floats are serialized with ``repr`` precision, so numeric
round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError
from .geometry import CameraIntrinsics, Skeleton, project_to_camera

FORMAT_VERSION = 1


@dataclass
class SequenceRecord:
    """One motion clip: frame indices with paired 2D and 3D poses."""

    seq_id: str
    camera_index: int
    frames: np.ndarray  # (T,) int frame indices
    poses_2d: np.ndarray  # (T, J, 2) normalized coords
    poses_3d: np.ndarray  # (T, J, 3) mm

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class PoseDataset:
    """In-memory dataset: header metadata plus sequence records."""

    skeleton: Skeleton
    frame_rate: float
    cameras: list[CameraIntrinsics]
    records: list[SequenceRecord]
    noise: dict | None = None

    def __len__(self) -> int:
        return len(self.records)


def _skeleton_to_dict(s: Skeleton) -> dict:
    return {
        "name": s.name,
        "joint_names": list(s.joint_names),
        "root": s.root,
        "flip_pairs": [list(p) for p in s.flip_pairs],
        "parents": list(s.parents) if s.parents is not None else None,
    }


def _skeleton_from_dict(raw: dict) -> Skeleton:
    return Skeleton(
        name=raw["name"],
        joint_names=tuple(raw["joint_names"]),
        root=int(raw["root"]),
        flip_pairs=tuple((int(a), int(b)) for a, b in raw["flip_pairs"]),
        parents=tuple(int(p) for p in raw["parents"]) if raw.get("parents") else None,
    )


def write_dataset(dataset: PoseDataset, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "skeleton": _skeleton_to_dict(dataset.skeleton),
        "frame_rate": dataset.frame_rate,
        "cameras": [c.to_dict() for c in dataset.cameras],
        "noise": dataset.noise,
        "sequences": len(dataset.records),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in dataset.records:
            fh.write(json.dumps({
                "id": rec.seq_id,
                "camera": rec.camera_index,
                "frames": np.asarray(rec.frames).tolist(),
                "poses_2d": np.asarray(rec.poses_2d).tolist(),
                "poses_3d": np.asarray(rec.poses_3d).tolist(),
            }) + "\n")


def read_dataset(path) -> PoseDataset:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise DatasetError(f"dataset {path} is empty")
    try:
        header = json.loads(lines[0])
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format version {header.get('format_version')}")
        skeleton = _skeleton_from_dict(header["skeleton"])
        cameras = [CameraIntrinsics.from_dict(c) for c in header["cameras"]]
        records = []
        for line in lines[1:]:
            raw = json.loads(line)
            records.append(SequenceRecord(
                seq_id=str(raw["id"]),
                camera_index=int(raw["camera"]),
                frames=np.asarray(raw["frames"], dtype=np.int64),
                poses_2d=np.asarray(raw["poses_2d"], dtype=np.float64),
                poses_3d=np.asarray(raw["poses_3d"], dtype=np.float64),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed dataset {path}: {exc}") from exc
    return PoseDataset(skeleton=skeleton, frame_rate=float(header["frame_rate"]),
                       cameras=cameras, records=records, noise=header.get("noise"))


PROJECTION_TOLERANCE = 1e-9
BONE_LENGTH_RELATIVE_TOLERANCE = 1e-6


def validate_dataset(dataset: PoseDataset) -> list[str]:
    """Consistency diagnostics; returns human-readable problems (empty = clean).

    Checks per record: shapes against the skeleton, monotone frame indices,
    bone-length constancy over time (when the skeleton has a parent tree)
    and, for noise-free datasets, that the stored 2D poses are exact
    projections of the 3D poses under the stated camera.
    """
    problems = []
    j = dataset.skeleton.joint_count
    noise_free = dataset.noise is None
    for rec in dataset.records:
        t = len(rec.frames)
        if rec.poses_2d.shape != (t, j, 2):
            problems.append(f"{rec.seq_id}: 2d poses have shape {rec.poses_2d.shape}, expected {(t, j, 2)}")
            continue
        if rec.poses_3d.shape != (t, j, 3):
            problems.append(f"{rec.seq_id}: 3d poses have shape {rec.poses_3d.shape}, expected {(t, j, 3)}")
            continue
        if np.any(np.diff(rec.frames) <= 0):
            problems.append(f"{rec.seq_id}: frame indices are not strictly increasing")
        if not 0 <= rec.camera_index < len(dataset.cameras):
            problems.append(f"{rec.seq_id}: camera index {rec.camera_index} out of range")
            continue
        if dataset.skeleton.parents is not None and t > 0:
            bones = dataset.skeleton.bone_list()
            children = [c for c, _ in bones]
            parents = [p for _, p in bones]
            lengths = np.linalg.norm(rec.poses_3d[:, children] - rec.poses_3d[:, parents], axis=-1)
            ref = lengths[0]
            dev = np.abs(lengths - ref) / np.maximum(ref, 1e-9)
            if np.any(dev > BONE_LENGTH_RELATIVE_TOLERANCE):
                frame, bone = np.unravel_index(np.argmax(dev), dev.shape)
                problems.append(
                    f"{rec.seq_id}: bone {children[bone]}->{parents[bone]} changes length "
                    f"at frame {rec.frames[frame]} (relative deviation {dev[frame, bone]:.2e})")
        if noise_free and t > 0:
            cam = dataset.cameras[rec.camera_index]
            try:
                reproj = project_to_camera(rec.poses_3d, cam)
            except Exception as exc:
                problems.append(f"{rec.seq_id}: reprojection failed: {exc}")
                continue
            residual = np.abs(reproj - rec.poses_2d)
            if residual.max() > PROJECTION_TOLERANCE:
                frame, joint, _ = np.unravel_index(np.argmax(residual), residual.shape)
                problems.append(
                    f"{rec.seq_id}: 2d pose at frame {rec.frames[frame]} joint {joint} deviates "
                    f"from the 3d projection by {residual.max():.3e}")
    return problems
