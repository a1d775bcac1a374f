"""Skeleton definitions and pose geometry.

Conventions used across the package:
  * 2D poses are (J, 2) arrays in normalized image coordinates, x in [-1, 1].
  * 3D poses are (J, 3) arrays in metric camera coordinates, millimeters.
  * Sequences stack poses along a leading time axis: (T, J, 2) / (T, J, 3).
All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import yaml

from .errors import InvalidPoseError, ProjectionDomainError, SparseliftError

DEPTH_EPSILON_MM = 100.0


@dataclass(frozen=True)
class Skeleton:
    """Joint topology: names, root joint, left/right pairing and (optional) bone tree.

    ``flip_pairs`` lists (left, right) joint indices swapped by a horizontal
    flip; all other joints map to themselves. ``parents`` is the kinematic
    tree (parent index per joint, -1 for the root); it is optional and only
    required by bone-length checks and the synthetic motion generator.
    """

    name: str
    joint_names: tuple[str, ...]
    root: int
    flip_pairs: tuple[tuple[int, int], ...] = ()
    parents: tuple[int, ...] | None = None

    def __post_init__(self):
        j = self.joint_count
        if j < 1:
            raise SparseliftError("skeleton needs at least one joint")
        if not 0 <= self.root < j:
            raise SparseliftError(f"root index {self.root} outside [0, {j})")
        seen = set()
        for left, right in self.flip_pairs:
            for idx in (left, right):
                if not 0 <= idx < j:
                    raise SparseliftError(f"flip pair index {idx} outside [0, {j})")
                if idx in seen:
                    raise SparseliftError(f"joint {idx} appears in more than one flip pair")
                seen.add(idx)
            if left == right:
                raise SparseliftError(f"flip pair ({left}, {right}) is degenerate")
        if self.parents is not None:
            if len(self.parents) != j:
                raise SparseliftError("parents must list one entry per joint")
            if self.parents[self.root] != -1:
                raise SparseliftError("root joint must have parent -1")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def fixed_joints(self) -> tuple[int, ...]:
        """Joints unaffected by flipping (not a member of any pair)."""
        paired = {i for pair in self.flip_pairs for i in pair}
        return tuple(i for i in range(self.joint_count) if i not in paired)

    def flip_permutation(self) -> np.ndarray:
        """Row permutation applied by a horizontal flip; an involution."""
        perm = np.arange(self.joint_count)
        for left, right in self.flip_pairs:
            perm[left], perm[right] = right, left
        return perm

    def bone_list(self) -> tuple[tuple[int, int], ...]:
        """(child, parent) index pairs of the kinematic tree."""
        if self.parents is None:
            raise SparseliftError(f"skeleton '{self.name}' has no parent tree")
        return tuple((c, p) for c, p in enumerate(self.parents) if p >= 0)


# 17-joint skeleton following the common indoor-benchmark convention:
# pelvis root, right/left leg, spine chain, left/right arm.
H36M_SKELETON = Skeleton(
    name="h36m-17",
    joint_names=(
        "pelvis", "r_hip", "r_knee", "r_ankle",
        "l_hip", "l_knee", "l_ankle",
        "spine", "thorax", "neck", "head",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
    ),
    root=0,
    flip_pairs=((1, 4), (2, 5), (3, 6), (14, 11), (15, 12), (16, 13)),
    parents=(-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
)


def load_skeleton(path) -> Skeleton:
    """Load a skeleton definition from a YAML file.

    Expected keys: ``name``, ``joint_names`` (list), ``root`` (int),
    ``flip_pairs`` (list of [left, right]), optional ``parents`` (list).
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        return Skeleton(
            name=raw["name"],
            joint_names=tuple(raw["joint_names"]),
            root=int(raw["root"]),
            flip_pairs=tuple((int(a), int(b)) for a, b in raw.get("flip_pairs", [])),
            parents=tuple(int(p) for p in raw["parents"]) if raw.get("parents") else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SparseliftError(f"malformed skeleton file {path}: {exc}") from exc


def save_skeleton(skeleton: Skeleton, path) -> None:
    payload = {
        "name": skeleton.name,
        "joint_names": list(skeleton.joint_names),
        "root": skeleton.root,
        "flip_pairs": [list(p) for p in skeleton.flip_pairs],
    }
    if skeleton.parents is not None:
        payload["parents"] = list(skeleton.parents)
    with open(path, "w") as fh:
        yaml.safe_dump(payload, fh, sort_keys=False)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if min(self.fx, self.fy, self.width, self.height) <= 0:
            raise SparseliftError("focal lengths and resolution must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise SparseliftError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, raw: dict) -> "CameraIntrinsics":
        return cls(**{k: float(raw[k]) for k in ("fx", "fy", "cx", "cy", "width", "height")})


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidPoseError(f"{what} contains non-finite values")


def normalize_image_coords(pixels: np.ndarray, camera: CameraIntrinsics) -> np.ndarray:
    """Map pixel coordinates to [-1, 1] on x, same isotropic scale on y.

    Both axes are centered on the image center and divided by width/2, so
    the aspect ratio is preserved and x spans exactly [-1, 1].
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    _check_finite(pixels, "pixel pose")
    half_w = camera.width / 2.0
    out = np.empty_like(pixels)
    out[..., 0] = (pixels[..., 0] - half_w) / half_w
    out[..., 1] = (pixels[..., 1] - camera.height / 2.0) / half_w
    return out


def denormalize_image_coords(coords: np.ndarray, camera: CameraIntrinsics) -> np.ndarray:
    """Exact inverse of :func:`normalize_image_coords`."""
    coords = np.asarray(coords, dtype=np.float64)
    _check_finite(coords, "normalized pose")
    half_w = camera.width / 2.0
    out = np.empty_like(coords)
    out[..., 0] = coords[..., 0] * half_w + half_w
    out[..., 1] = coords[..., 1] * half_w + camera.height / 2.0
    return out


def project_to_camera(
    points_mm: np.ndarray,
    camera: CameraIntrinsics,
    depth_epsilon: float = DEPTH_EPSILON_MM,
) -> np.ndarray:
    """Pinhole-project 3D camera-space points (mm) to normalized 2D coords.

    Accepts a single pose (J, 3) or a sequence (T, J, 3). Raises
    :class:`ProjectionDomainError` naming frame and joint if any depth is
    at or below ``depth_epsilon``.
    """
    points = np.asarray(points_mm, dtype=np.float64)
    _check_finite(points, "3d pose")
    z = points[..., 2]
    if np.any(z <= depth_epsilon):
        bad = np.argwhere(z <= depth_epsilon)[0]
        if points.ndim == 3:
            frame, joint = int(bad[0]), int(bad[1])
        else:
            frame, joint = None, int(bad[0])
        raise ProjectionDomainError(
            f"joint {joint}" + ("" if frame is None else f" in frame {frame}")
            + f" has depth {float(z[tuple(bad)]):.1f} mm <= {depth_epsilon} mm",
            frame=frame, joint=joint,
        )
    u = camera.cx + camera.fx * points[..., 0] / z
    v = camera.cy + camera.fy * points[..., 1] / z
    return normalize_image_coords(np.stack([u, v], axis=-1), camera)


def back_project(coords: np.ndarray, depths_mm: np.ndarray, camera: CameraIntrinsics) -> np.ndarray:
    """Recover 3D camera-space points from normalized 2D coords and true depths."""
    pixels = denormalize_image_coords(coords, camera)
    z = np.asarray(depths_mm, dtype=np.float64)
    x = (pixels[..., 0] - camera.cx) * z / camera.fx
    y = (pixels[..., 1] - camera.cy) * z / camera.fy
    return np.stack([x, y, z], axis=-1)


def horizontal_flip(pose: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Mirror a 2D or 3D pose: negate x, swap left/right joint rows.

    Works on single poses (J, D) and sequences (T, J, D); an involution.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2] != skeleton.joint_count:
        raise InvalidPoseError(
            f"pose has {pose.shape[-2]} joints, skeleton expects {skeleton.joint_count}")
    perm = skeleton.flip_permutation()
    flipped = pose[..., perm, :].copy()
    flipped[..., 0] = -flipped[..., 0]
    return flipped


def root_relative(pose: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Subtract the root joint from every joint; the root row becomes zero."""
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., skeleton.root : skeleton.root + 1, :]


def bilinear_upsample(
    sparse_frames: np.ndarray,
    key_indices: Sequence[int],
    target_len: int,
) -> np.ndarray:
    """Linearly interpolate key-frame poses onto a dense frame grid.

    ``sparse_frames`` is (K, J, D) with frame positions ``key_indices``
    (strictly increasing). Key frames are reproduced exactly; queries
    outside [first, last] replicate the nearest key pose.
    """
    frames = np.asarray(sparse_frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise InvalidPoseError("sparse input must be a non-empty (K, J, D) array")
    keys = np.asarray(key_indices, dtype=np.float64)
    if keys.shape != (frames.shape[0],):
        raise InvalidPoseError("key_indices must match the number of sparse frames")
    if np.any(np.diff(keys) <= 0):
        raise InvalidPoseError("key_indices must be strictly increasing")

    t = np.arange(target_len, dtype=np.float64)
    flat = frames.reshape(frames.shape[0], -1)
    # np.interp clamps outside [keys[0], keys[-1]], i.e. replicate-extension.
    dense = np.stack([np.interp(t, keys, flat[:, c]) for c in range(flat.shape[1])], axis=1)
    return dense.reshape(target_len, *frames.shape[1:])


def pose_velocity(frames_mm: np.ndarray, skeleton: Skeleton, frame_rate: float) -> np.ndarray:
    """Mean root-relative joint speed per frame, in m/s.

    Velocity at frame t is the joint-average Euclidean displacement of the
    root-relative pose between frames t-1 and t, scaled from mm/frame to
    m/s. The first frame copies the second (undefined otherwise).
    """
    frames = np.asarray(frames_mm, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise InvalidPoseError("pose velocity needs a (T, J, 3) sequence with T >= 2")
    if frame_rate <= 0:
        raise SparseliftError("frame_rate must be positive")
    rel = root_relative(frames, skeleton)
    step = np.linalg.norm(np.diff(rel, axis=0), axis=-1).mean(axis=1)
    v = np.concatenate([step[:1], step]) * frame_rate / 1000.0
    return v
