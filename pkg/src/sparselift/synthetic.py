"""Synthetic motion-capture stand-in: parametric 3D motion plus virtual cameras.

Motions are generated on a kinematic tree by rotating bones around their
parent joints, so bone lengths are constant by construction. The
``sinusoidal-limbs`` kind moves the end-effector joints on circular arcs
with a common phase, which makes the per-frame joint speed analytically
2*pi*f*A at the peak (A = displacement amplitude in mm, f in Hz).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import PoseDataset, SequenceRecord
from .errors import SparseliftError
from .geometry import CameraIntrinsics, Skeleton, denormalize_image_coords, project_to_camera

MOTION_KINDS = ("sinusoidal-limbs", "smooth-random-walk", "burst")

# Rest-pose bone offsets (child minus parent, mm) for the 17-joint skeleton:
# x right, y down, z toward the camera's viewing direction. Mild depth
# offsets keep the skeleton non-planar.
_H36M_OFFSETS = {
    1: (-130.0, 0.0, 15.0), 2: (0.0, 450.0, -20.0), 3: (0.0, 450.0, 30.0),
    4: (130.0, 0.0, -15.0), 5: (0.0, 450.0, 20.0), 6: (0.0, 450.0, -30.0),
    7: (0.0, -230.0, 25.0), 8: (0.0, -230.0, -15.0), 9: (0.0, -110.0, 20.0),
    10: (0.0, -120.0, 35.0),
    11: (180.0, 20.0, -25.0), 12: (0.0, 280.0, 30.0), 13: (0.0, 250.0, -20.0),
    14: (-180.0, 20.0, 25.0), 15: (0.0, 280.0, -30.0), 16: (0.0, 250.0, 20.0),
}


AXIS_MODES = ("image-plane", "free")


@dataclass(frozen=True)
class MotionSpec:
    """Parameters of one synthetic motion clip.

    ``axis_mode`` selects the bone rotation axes. The default
    ``image-plane`` rotates about the viewing direction, so every joint
    keeps a constant depth and monocular lifting of the clip is
    well-posed; ``free`` uses random axes, which introduces the mirror
    (depth) ambiguity of real monocular capture.
    """

    kind: str
    duration: int
    frame_rate: float
    skeleton: Skeleton
    amplitude_mm: float = 100.0
    frequency_hz: float = 1.0
    seed: int = 0
    axis_mode: str = "image-plane"
    # (fraction of duration, amplitude factor) per burst segment.
    burst_profile: tuple[tuple[float, float], ...] = ((0.4, 0.15), (0.2, 1.0), (0.4, 0.15))

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise SparseliftError(f"unknown motion kind {self.kind!r}; choose from {MOTION_KINDS}")
        if self.axis_mode not in AXIS_MODES:
            raise SparseliftError(f"unknown axis mode {self.axis_mode!r}; choose from {AXIS_MODES}")
        if self.duration < 1 or self.frame_rate <= 0:
            raise SparseliftError("duration and frame_rate must be positive")
        if self.amplitude_mm < 0 or self.frequency_hz <= 0:
            raise SparseliftError("amplitude must be >= 0 and frequency > 0")


@dataclass(frozen=True)
class MotionSegment:
    """A contiguous frame range with an analytic peak velocity tag (m/s)."""

    start: int
    end: int
    peak_velocity_mps: float


@dataclass
class MotionSample:
    frames: np.ndarray  # (T, J, 3) mm, pelvis near the origin
    spec: MotionSpec
    segments: list[MotionSegment] = field(default_factory=list)


def rest_pose(skeleton: Skeleton) -> np.ndarray:
    """Static (J, 3) rest pose derived from the skeleton's parent tree."""
    if skeleton.parents is None:
        raise SparseliftError(f"skeleton '{skeleton.name}' has no parent tree; cannot synthesize")
    offsets = bone_offsets(skeleton)
    pose = np.zeros((skeleton.joint_count, 3))
    for child, parent in _topological_bones(skeleton):
        pose[child] = pose[parent] + offsets[child]
    return pose


def bone_offsets(skeleton: Skeleton) -> dict[int, np.ndarray]:
    if skeleton.name == "h36m-17":
        return {c: np.asarray(v) for c, v in _H36M_OFFSETS.items()}
    # Procedural fallback: fixed-length bones fanned out deterministically.
    offsets = {}
    for child, parent in skeleton.bone_list():
        angle = 2.399963 * child  # golden-angle spacing
        offsets[child] = 220.0 * np.asarray([math.cos(angle), math.sin(angle), 0.25 * math.sin(2 * angle)])
    return offsets


def _topological_bones(skeleton: Skeleton) -> list[tuple[int, int]]:
    order, placed = [], {skeleton.root}
    bones = list(skeleton.bone_list())
    while bones:
        progressed = False
        for child, parent in list(bones):
            if parent in placed:
                order.append((child, parent))
                placed.add(child)
                bones.remove((child, parent))
                progressed = True
        if not progressed:
            raise SparseliftError(f"skeleton '{skeleton.name}' parent tree has a cycle")
    return order


def _rotation_about_axis(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrices, one per angle: (T, 3, 3)."""
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    eye = np.eye(3)
    sin = np.sin(angles)[:, None, None]
    cos = np.cos(angles)[:, None, None]
    return eye + sin * k + (1.0 - cos) * (k @ k)


def _end_effectors(skeleton: Skeleton) -> list[int]:
    parents = set(p for _, p in skeleton.bone_list())
    return [c for c, _ in skeleton.bone_list() if c not in parents]


def _perpendicular_axis(bone: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    direction = bone / np.linalg.norm(bone)
    candidate = rng.normal(size=3)
    candidate -= candidate.dot(direction) * direction
    norm = np.linalg.norm(candidate)
    if norm < 1e-9:
        candidate = np.cross(direction, [1.0, 0.0, 0.0])
        norm = np.linalg.norm(candidate)
    return candidate / norm


def _bone_axes(skeleton: Skeleton, offsets, axis_mode: str, rng) -> dict[int, np.ndarray]:
    if axis_mode == "image-plane":
        return {c: np.array([0.0, 0.0, 1.0]) for c, _ in skeleton.bone_list()}
    return {c: _perpendicular_axis(offsets[c], rng) for c, _ in skeleton.bone_list()}


def _arc_radius(offset: np.ndarray, axis: np.ndarray) -> float:
    """Distance of the bone tip from the rotation axis through the parent."""
    radial = offset - offset.dot(axis) * axis
    return float(np.linalg.norm(radial))


def _pose_from_angles(skeleton: Skeleton, offsets, axes, angles, root_path) -> np.ndarray:
    t = root_path.shape[0]
    pose = np.zeros((t, skeleton.joint_count, 3))
    pose[:, skeleton.root] = root_path
    for child, parent in _topological_bones(skeleton):
        if child in angles:
            rot = _rotation_about_axis(axes[child], angles[child])
            vec = rot @ offsets[child]
        else:
            vec = np.broadcast_to(offsets[child], (t, 3))
        pose[:, child] = pose[:, parent] + vec
    return pose


def generate_motion(spec: MotionSpec) -> MotionSample:
    """Deterministic synthetic motion for ``spec`` (pure in the spec, incl. seed)."""
    skeleton = spec.skeleton
    offsets = bone_offsets(skeleton)
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.duration, dtype=np.float64)
    omega = 2.0 * math.pi * spec.frequency_hz / spec.frame_rate
    movers = _end_effectors(skeleton)
    axes = _bone_axes(skeleton, offsets, spec.axis_mode, rng)
    # Angular amplitude alpha = A / arc radius puts the bone tip on an arc
    # of displacement amplitude A, with exact peak speed 2*pi*f*A.
    radii = {c: _arc_radius(offsets[c], axes[c]) for c, _ in skeleton.bone_list()}
    if any(radii[c] < 1.0 for c in movers):
        raise SparseliftError("a moving bone is (nearly) parallel to its rotation axis")
    root_path = np.zeros((spec.duration, 3))
    segments: list[MotionSegment] = []

    if spec.kind == "sinusoidal-limbs":
        angles = {}
        for child in movers:
            angles[child] = (spec.amplitude_mm / radii[child]) * np.sin(omega * t)
        peak = 2.0 * math.pi * spec.frequency_hz * spec.amplitude_mm / 1000.0
        segments.append(MotionSegment(0, spec.duration, peak))
    elif spec.kind == "smooth-random-walk":
        angles = {}
        window = max(1, int(round(spec.frame_rate / (2.0 * spec.frequency_hz))))
        kernel = np.ones(window) / window
        for child, _ in skeleton.bone_list():
            if radii[child] < 1.0:
                continue
            sigma = omega * spec.amplitude_mm / radii[child]
            walk = np.cumsum(rng.normal(0.0, sigma, spec.duration))
            angles[child] = np.convolve(np.pad(walk, (window, window), mode="edge"),
                                        kernel, mode="same")[window:-window]
        drift = np.cumsum(rng.normal(0.0, spec.amplitude_mm * omega * 0.5, (spec.duration, 3)), axis=0)
        if spec.axis_mode == "image-plane":
            drift[:, 2] = 0.0  # keep depths constant for identifiable lifting
        root_path = np.apply_along_axis(
            lambda c: np.convolve(np.pad(c, (window, window), mode="edge"), kernel, mode="same")[window:-window],
            0, drift)
    else:  # burst
        fractions = [frac for frac, _ in spec.burst_profile]
        counts = [int(round(frac * spec.duration)) for frac in fractions]
        counts[-1] = spec.duration - sum(counts[:-1])
        if min(counts) < 0:
            raise SparseliftError("burst profile fractions do not fit the duration")
        factor = np.empty(spec.duration)
        start = 0
        for count, (_, amp_factor) in zip(counts, spec.burst_profile):
            factor[start : start + count] = amp_factor
            peak = 2.0 * math.pi * spec.frequency_hz * spec.amplitude_mm * amp_factor / 1000.0
            segments.append(MotionSegment(start, start + count, peak))
            start += count
        angles = {}
        for child in movers:
            angles[child] = (factor * spec.amplitude_mm / radii[child]) * np.sin(omega * t)

    frames = _pose_from_angles(skeleton, offsets, axes, angles, root_path)
    return MotionSample(frames=frames, spec=spec, segments=segments)


@dataclass(frozen=True)
class CameraRanges:
    """Sampling ranges for virtual studio cameras and subject placement."""

    focal_px: tuple[float, float] = (1000.0, 1150.0)
    resolution: tuple[float, float] = (1000.0, 1000.0)
    principal_jitter_px: float = 10.0
    depth_mm: tuple[float, float] = (3500.0, 5500.0)
    lateral_mm: float = 500.0
    vertical_mm: float = 300.0


def sample_camera(
    rng: np.random.Generator,
    ranges: CameraRanges = CameraRanges(),
    motion_frames: np.ndarray | None = None,
    max_attempts: int = 100,
) -> tuple[CameraIntrinsics, np.ndarray]:
    """Draw a virtual camera and a subject placement (mm translation).

    When ``motion_frames`` is given, rejection-sample until the translated
    motion projects fully inside the frame with all depths positive.
    """
    w, h = ranges.resolution
    for _ in range(max_attempts):
        f = rng.uniform(*ranges.focal_px)
        camera = CameraIntrinsics(
            fx=f, fy=f,
            cx=w / 2.0 + rng.uniform(-ranges.principal_jitter_px, ranges.principal_jitter_px),
            cy=h / 2.0 + rng.uniform(-ranges.principal_jitter_px, ranges.principal_jitter_px),
            width=w, height=h,
        )
        placement = np.array([
            rng.uniform(-ranges.lateral_mm, ranges.lateral_mm),
            rng.uniform(-ranges.vertical_mm, ranges.vertical_mm),
            rng.uniform(*ranges.depth_mm),
        ])
        if motion_frames is None:
            return camera, placement
        translated = np.asarray(motion_frames) + placement
        if translated[..., 2].min() <= 0:
            continue
        try:
            coords = project_to_camera(translated, camera)
        except SparseliftError:
            continue
        pixels = denormalize_image_coords(coords, camera)
        if (pixels[..., 0].min() >= 0 and pixels[..., 0].max() <= w
                and pixels[..., 1].min() >= 0 and pixels[..., 1].max() <= h):
            return camera, placement
    raise SparseliftError(f"no valid camera found in {max_attempts} attempts")


@dataclass(frozen=True)
class NoiseConfig:
    """Detector-error stand-in: Gaussian jitter plus optional joint dropout.

    ``sigma`` is the per-axis standard deviation in normalized image
    coordinates; dropped-out joints repeat their previous-frame value.
    """

    sigma: float = 0.005
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "dropout": self.dropout}


def apply_noise(poses_2d: np.ndarray, noise: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    noisy = poses_2d + rng.normal(0.0, noise.sigma, poses_2d.shape)
    if noise.dropout > 0:
        drop = rng.random(poses_2d.shape[:2]) < noise.dropout
        drop[0] = False  # first frame has no predecessor
        for t in range(1, len(noisy)):
            noisy[t][drop[t]] = noisy[t - 1][drop[t]]
    return noisy


def build_dataset(
    specs: list[MotionSpec],
    camera_ranges: CameraRanges = CameraRanges(),
    noise: NoiseConfig | None = None,
    seed: int = 0,
) -> PoseDataset:
    """Generate motions, place them before virtual cameras, project to 2D pairs."""
    if not specs:
        raise SparseliftError("need at least one motion spec")
    skeleton = specs[0].skeleton
    frame_rate = specs[0].frame_rate
    for spec in specs:
        if spec.skeleton.name != skeleton.name or spec.skeleton.joint_count != skeleton.joint_count:
            raise SparseliftError("all motion specs must share one skeleton")
        if spec.frame_rate != frame_rate:
            raise SparseliftError("all motion specs must share one frame rate")
    rng = np.random.default_rng(seed)
    cameras, records = [], []
    for i, spec in enumerate(specs):
        motion = generate_motion(spec)
        camera, placement = sample_camera(rng, camera_ranges, motion.frames)
        poses_3d = motion.frames + placement
        poses_2d = project_to_camera(poses_3d, camera)
        if noise is not None and (noise.sigma > 0 or noise.dropout > 0):
            poses_2d = apply_noise(poses_2d, noise, rng)
        cameras.append(camera)
        records.append(SequenceRecord(
            seq_id=f"seq{i:03d}",
            camera_index=i,
            frames=np.arange(len(poses_3d), dtype=np.int64),
            poses_2d=poses_2d,
            poses_3d=poses_3d,
        ))
    noise_tag = noise.to_dict() if noise is not None and (noise.sigma > 0 or noise.dropout > 0) else None
    return PoseDataset(skeleton=skeleton, frame_rate=frame_rate, cameras=cameras,
                       records=records, noise=noise_tag)
