"""Synthetic observation generator and the observation stream file format.

The generator stands in for the two networks: it animates the skeleton with
closed-form per-DOF sinusoids, then emits what the networks would predict,
namely a root heatmap, one heatmap per joint, root-relative 3D joints and a
3D root, with configurable noise, occlusion and root-heatmap outliers.
Ground truth comes along for evaluation.

All emitted arrays hold float32-representable values so that writing a
sequence to disk and reading it back is lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, RootLocation, default_camera, pack_camera, project, unpack_camera, _CAMERA_STRUCT
from .errors import FormatError, InvalidInputError, VersionMismatchError
from .localization import Heatmap
from .optimizer import Observation
from .skeleton import ANGLES, NUM_ANGLES, NUM_DOF, NUM_JOINTS, ROTATION, Skeleton, forward_kinematics, make_pose

HEATMAP_SHAPE = (30, 40)  # rows, cols
HEATMAP_SCALE = 8.0
OCCLUDED_AMPLITUDE = 0.05
OUTLIER_AMPLITUDE = 0.08


@dataclass(frozen=True, eq=False)
class MotionModel:
    """``value(t) = center + amplitude * sin(2 pi t / period + phase)`` per DOF.

    Angles are clipped to the joint limits; the global translation is not
    modelled here, it follows from the root trajectory.
    """

    center: np.ndarray  # (26,)
    amplitude: np.ndarray  # (26,)
    period: np.ndarray  # (26,) frames
    phase: np.ndarray  # (26,)

    def at(self, t: float) -> np.ndarray:
        return self.center + self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)


def default_motion(skeleton: Skeleton, seed: int = 0) -> MotionModel:
    """Fingers flexing around a relaxed pose, hand seen from behind, fingers up."""
    rng = np.random.default_rng([seed, 0x6D6F74])
    lo, hi = skeleton.limits_lower, skeleton.limits_upper
    center = np.zeros(NUM_DOF)
    amplitude = np.zeros(NUM_DOF)
    period = np.full(NUM_DOF, 90.0)
    phase = np.zeros(NUM_DOF)
    center[ROTATION] = (0.4, 0.0, np.pi)
    amplitude[ROTATION] = (0.15, 0.15, 0.1)
    period[ROTATION] = rng.uniform(80, 160, 3)
    phase[ROTATION] = rng.uniform(0, 2 * np.pi, 3)
    span = hi - lo
    center[ANGLES] = lo + 0.35 * span
    amplitude[ANGLES] = 0.25 * span
    abd = np.array(["abd" in n for n in skeleton.dof_names])
    center[ANGLES][abd] = 0.0
    amplitude[ANGLES][abd] = 0.3 * hi[abd]
    period[ANGLES] = rng.uniform(60, 150, NUM_ANGLES)
    phase[ANGLES] = rng.uniform(0, 2 * np.pi, NUM_ANGLES)
    return MotionModel(center, amplitude, period, phase)


@dataclass(frozen=True, eq=False)
class RootTrajectory:
    """Root (middle-MCP) path: ``center + amplitude * sin(2 pi t / period + phase)`` per axis, mm."""

    center: np.ndarray = field(default_factory=lambda: np.array([0.0, -15.0, 520.0]))
    amplitude: np.ndarray = field(default_factory=lambda: np.array([40.0, 15.0, 40.0]))
    period: np.ndarray = field(default_factory=lambda: np.array([150.0, 110.0, 130.0]))
    phase: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 2.0]))

    def at(self, t: float) -> np.ndarray:
        return self.center + self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)


@dataclass(frozen=True, eq=False)
class SynthConfig:
    sequence_length: int = 200
    motion_model: MotionModel | None = None
    root_trajectory: RootTrajectory = field(default_factory=RootTrajectory)
    pose_trajectory: np.ndarray | None = None  # optional (T, 26) override of the motion model
    position_noise: float = 25.0
    root_noise: float = 25.0
    occlusion_rate: float = 0.0
    heatmap_sigma: float = 2.0
    heatmap_outlier_rate: float = 0.0
    shape_scale: float = 1.0
    seed: int = 0
    heatmap_shape: tuple[int, int] = HEATMAP_SHAPE
    heatmap_scale: float = HEATMAP_SCALE

    def __post_init__(self):
        for name in ("occlusion_rate", "heatmap_outlier_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidInputError(f"{name} must be a probability")
        if not self.heatmap_sigma > 0:
            raise InvalidInputError("heatmap_sigma must be positive")
        if self.position_noise < 0 or self.root_noise < 0:
            raise InvalidInputError("noise half-widths must be non-negative")
        if not 0.8 <= self.shape_scale <= 1.2:
            raise InvalidInputError("shape_scale must lie in [0.8, 1.2]")
        if self.sequence_length < 0:
            raise InvalidInputError("sequence_length must be >= 0")
        if self.pose_trajectory is not None:
            traj = np.asarray(self.pose_trajectory, float)
            if traj.shape != (self.sequence_length, NUM_DOF):
                raise InvalidInputError("pose_trajectory must be (sequence_length, 26)")

    @classmethod
    def noiseless(cls, **kw) -> "SynthConfig":
        return cls(position_noise=0.0, root_noise=0.0, occlusion_rate=0.0,
                   heatmap_outlier_rate=0.0, **kw)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    pose: np.ndarray  # (26,)
    positions: np.ndarray  # (21, 3) mm
    root_uv: np.ndarray  # (2,) px, projected middle MCP


def gaussian_heatmap(shape, center, sigma: float, amplitude: float = 1.0) -> np.ndarray:
    """Gaussian blob sampled on a ``(rows, cols)`` grid; ``center`` is (col, row)."""
    rows, cols = shape
    y = np.arange(rows)[:, None]
    x = np.arange(cols)[None, :]
    d2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
    return amplitude * np.exp(-d2 / (2 * sigma**2))


def _f32(a) -> np.ndarray:
    return np.asarray(a, np.float32).astype(np.float64)


def _frame_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, t])


def _frame_pose(skeleton: Skeleton, config: SynthConfig, motion: MotionModel, t: int, root_shift):
    if config.pose_trajectory is not None:
        pose = np.array(config.pose_trajectory[t], float)
        pose[ANGLES] = np.clip(pose[ANGLES], skeleton.limits_lower, skeleton.limits_upper)
    else:
        pose = motion.at(t)
        pose[ANGLES] = np.clip(pose[ANGLES], skeleton.limits_lower, skeleton.limits_upper)
        rest = forward_kinematics(skeleton, make_pose(rotation=pose[ROTATION], angles=pose[ANGLES]))
        pose[0:3] = config.root_trajectory.at(t) + root_shift - rest[skeleton.root_joint]
    return pose


def generate_frame(skeleton: Skeleton, camera: Camera, config: SynthConfig, t: int,
                   motion: MotionModel | None = None):
    """One ``(Observation, GroundTruth)`` pair; closed-form in ``t``."""
    gen_skel = skeleton.scaled(config.shape_scale) if config.shape_scale != 1.0 else skeleton
    motion = motion or config.motion_model or default_motion(gen_skel, config.seed)
    shift = np.zeros(3)
    for _ in range(10):
        pose = _f32(_frame_pose(gen_skel, config, motion, t, shift))
        pos = forward_kinematics(gen_skel, pose)
        if np.all(pos[:, 2] > 1.0):
            break
        if config.pose_trajectory is not None:
            raise InvalidInputError(f"frame {t}: supplied pose puts joints behind the camera")
        shift = shift + np.array([0.0, 0.0, 100.0])
    else:
        raise InvalidInputError(f"frame {t}: could not keep every joint in front of the camera")

    rng = _frame_rng(config.seed, t)
    root = gen_skel.root_joint
    pos = _f32(pos)
    r_true = pos[root]
    r_noise = rng.uniform(-config.root_noise, config.root_noise, 3)
    p_noise = rng.uniform(-config.position_noise, config.position_noise, (NUM_JOINTS, 3))
    occluded = np.zeros(NUM_JOINTS, bool)
    tips = gen_skel.fingertips
    occluded[tips] = rng.uniform(size=tips.size) < config.occlusion_rate
    outlier = rng.uniform() < config.heatmap_outlier_rate
    rows, cols = config.heatmap_shape
    outlier_cell = rng.uniform([0, 0], [cols - 1, rows - 1])

    uv = project(camera, pos)
    s = config.heatmap_scale
    joint_hm = []
    for j in range(NUM_JOINTS):
        amp = OCCLUDED_AMPLITUDE if occluded[j] else 1.0
        joint_hm.append(_f32(gaussian_heatmap(config.heatmap_shape, uv[j] / s, config.heatmap_sigma, amp)))
    if outlier:
        root_hm = gaussian_heatmap(config.heatmap_shape, uv[root] / s, config.heatmap_sigma, OCCLUDED_AMPLITUDE)
        root_hm = np.maximum(root_hm, gaussian_heatmap(config.heatmap_shape, outlier_cell,
                                                       config.heatmap_sigma, OUTLIER_AMPLITUDE))
    else:
        root_hm = gaussian_heatmap(config.heatmap_shape, uv[root] / s, config.heatmap_sigma)
    root_hm = _f32(root_hm)

    # the outermost heatmap cells cannot localise a peak to sub-cell accuracy
    cell = uv / s
    in_view = (cell[:, 0] >= 1) & (cell[:, 0] <= cols - 2) & (cell[:, 1] >= 1) & (cell[:, 1] <= rows - 2)
    mask = ~occluded & in_view
    obs = Observation(
        local_positions=_f32(pos - r_true + p_noise),
        root_3d=_f32(r_true + r_noise),
        validity_mask=mask,
        root=RootLocation(*_f32([uv[root, 0], uv[root, 1], r_true[2], 1.0])),
        joint_heatmaps=tuple(Heatmap(h, s) for h in joint_hm),
        root_heatmap=Heatmap(root_hm, s),
    )
    return obs, GroundTruth(pose=pose, positions=pos, root_uv=_f32(uv[root]))


def generate_sequence(skeleton: Skeleton, camera: Camera | None = None,
                      config: SynthConfig | None = None):
    """Observations and ground truth for ``config.sequence_length`` frames."""
    camera = camera or default_camera()
    config = config or SynthConfig()
    gen_skel = skeleton.scaled(config.shape_scale) if config.shape_scale != 1.0 else skeleton
    motion = config.motion_model or default_motion(gen_skel, config.seed)
    observations, truth = [], []
    for t in range(config.sequence_length):
        obs, gt = generate_frame(skeleton, camera, config, t, motion)
        observations.append(obs)
        truth.append(gt)
    return observations, truth


# -- observation stream file ---------------------------------------------------

STREAM_MAGIC = b"HTOBSRV\x00"
STREAM_VERSION = 1
_HEADER = struct.Struct("<II I II f")  # version, frames, joints, hm rows, hm cols, hm scale


def write_observation_stream(path, observations, ground_truth, camera: Camera) -> None:
    """Serialise a sequence; ``ground_truth`` may be ``None`` or contain ``None`` entries."""
    path = Path(path)
    n = len(observations)
    if ground_truth is not None and len(ground_truth) != n:
        raise InvalidInputError("observations and ground truth differ in length")
    if n:
        rows, cols = observations[0].root_heatmap.shape
        scale = observations[0].root_heatmap.scale
    else:
        (rows, cols), scale = HEATMAP_SHAPE, HEATMAP_SCALE
    parts = [STREAM_MAGIC, _HEADER.pack(STREAM_VERSION, n, NUM_JOINTS, rows, cols, scale),
             pack_camera(camera)]
    for t, obs in enumerate(observations):
        gt = ground_truth[t] if ground_truth is not None else None
        if obs.root_heatmap is None or obs.joint_heatmaps is None:
            raise InvalidInputError(f"frame {t}: heatmaps are required for serialisation")
        root = obs.root or RootLocation(0.0, 0.0, 0.0, 0.0)
        parts += [
            np.asarray(obs.root_heatmap.values, "<f4").tobytes(),
            np.stack([h.values for h in obs.joint_heatmaps]).astype("<f4").tobytes(),
            obs.local_positions.astype("<f4").tobytes(),
            obs.root_3d.astype("<f4").tobytes(),
            np.array([root.u, root.v, root.z, root.confidence], "<f4").tobytes(),
            obs.validity_mask.astype(np.uint8).tobytes(),
            bytes([gt is not None]),
        ]
        if gt is not None:
            parts += [gt.pose.astype("<f4").tobytes(), gt.positions.astype("<f4").tobytes(),
                      np.asarray(gt.root_uv, "<f4").tobytes()]
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write observation stream {path}: {exc}") from exc


def read_observation_stream(path, expected_camera: Camera | None = None):
    """Inverse of :func:`write_observation_stream`.

    Returns ``(observations, ground_truth, camera)`` where ground-truth entries
    are ``None`` for frames written without it.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read observation stream {path}: {exc}") from exc
    if buf[: len(STREAM_MAGIC)] != STREAM_MAGIC:
        raise FormatError(f"{path}: not an observation stream")
    off = len(STREAM_MAGIC)
    try:
        version, n, joints, rows, cols, scale = _HEADER.unpack_from(buf, off)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if version != STREAM_VERSION:
        raise VersionMismatchError(f"{path}: unsupported stream version {version}")
    if joints != NUM_JOINTS:
        raise FormatError(f"{path}: stream has {joints} joints, expected {NUM_JOINTS}")
    off += _HEADER.size
    camera = unpack_camera(buf[off: off + _CAMERA_STRUCT.size])
    off += _CAMERA_STRUCT.size
    if expected_camera is not None and camera != expected_camera:
        raise FormatError(f"{path}: header camera does not match the expected camera")

    def take(count, dtype="<f4"):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(buf):
            raise FormatError(f"{path}: truncated frame data")
        a = np.frombuffer(buf, dtype, count, off)
        off += size
        return a

    hm = rows * cols
    observations, truth = [], []
    if rows == 0 or cols == 0 or not scale > 0:
        raise FormatError(f"{path}: invalid heatmap geometry {rows}x{cols} at scale {scale}")
    for t in range(n):
        root_hm = take(hm).reshape(rows, cols).astype(np.float64)
        joint_hm = take(NUM_JOINTS * hm).reshape(NUM_JOINTS, rows, cols).astype(np.float64)
        local = take(NUM_JOINTS * 3).reshape(NUM_JOINTS, 3).astype(np.float64)
        r = take(3).astype(np.float64)
        u, v, z, conf = take(4).astype(np.float64)
        mask = take(NUM_JOINTS, np.uint8).astype(bool)
        has_gt = take(1, np.uint8)[0]
        try:
            observations.append(Observation(
                local_positions=local, root_3d=r, validity_mask=mask,
                root=RootLocation(float(u), float(v), float(z), float(conf)),
                joint_heatmaps=tuple(Heatmap(h, scale) for h in joint_hm),
                root_heatmap=Heatmap(root_hm, scale),
            ))
        except InvalidInputError as exc:
            raise FormatError(f"{path}: frame {t}: {exc}") from exc
        if has_gt:
            pose = take(NUM_DOF).astype(np.float64)
            positions = take(NUM_JOINTS * 3).reshape(NUM_JOINTS, 3).astype(np.float64)
            root_uv = take(2).astype(np.float64)
            truth.append(GroundTruth(pose, positions, root_uv))
        else:
            truth.append(None)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return observations, truth, camera
