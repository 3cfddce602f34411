"""Kinematic hand model: 21 joints driven by a 26-entry pose vector.

Pose layout (all float64, millimetres and radians)::

    pose[0:3]   global translation of the wrist, mm
    pose[3:6]   global rotation, fixed-axis XYZ angles (R = Rz @ Ry @ Rx)
    pose[6:26]  joint angles in the order of the skeleton's DOF table

Joint positions are ``(21, 3)`` arrays in camera coordinates.  Each joint
sits at ``p[parent] + R[parent] @ (length * direction)`` where ``R[parent]``
is the accumulated frame of the parent, so bone lengths are preserved by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CalibrationError, FormatError, InvalidInputError, VersionMismatchError

NUM_JOINTS = 21
NUM_DOF = 26
NUM_ANGLES = 20

TRANSLATION = slice(0, 3)
ROTATION = slice(3, 6)
ANGLES = slice(6, 26)

SKELETON_FORMAT = "handtrack-skeleton"
SKELETON_VERSION = 1


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint hierarchy, bone lengths, DOF map and joint-angle limits.

    ``lengths[0]`` belongs to the wrist, which has no incoming bone, and is
    always zero.  ``directions`` are unit vectors in the parent's rest frame.
    """

    names: tuple[str, ...]
    parents: np.ndarray  # (21,), -1 at the wrist
    directions: np.ndarray  # (21, 3)
    lengths: np.ndarray  # (21,)
    dof_names: tuple[str, ...]
    dof_joint: np.ndarray  # (20,) joint rotated by each angular DOF
    dof_axis: np.ndarray  # (20, 3) unit axes in the joint's local frame
    limits_lower: np.ndarray  # (20,)
    limits_upper: np.ndarray  # (20,)
    root_joint: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("parents", "dof_joint"):
            object.__setattr__(self, name, _frozen(getattr(self, name), int))
        for name in ("directions", "lengths", "dof_axis", "limits_lower", "limits_upper"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        _validate(self)

    @property
    def bone_lengths(self) -> np.ndarray:
        """Lengths of the 20 bones, indexed by child joint 1..20."""
        return self.lengths[1:]

    @property
    def fingertips(self) -> np.ndarray:
        return np.flatnonzero(self.child_count == 0)

    @property
    def child_count(self) -> np.ndarray:
        return np.bincount(self.parents[1:], minlength=NUM_JOINTS)

    @property
    def offsets(self) -> np.ndarray:
        """Rest-frame bone vectors ``length * direction``."""
        if "offsets" not in self._cache:
            self._cache["offsets"] = self.lengths[:, None] * self.directions
        return self._cache["offsets"]

    def with_lengths(self, lengths) -> "Skeleton":
        return replace(self, lengths=np.asarray(lengths, float), _cache={})

    def scaled(self, beta: float) -> "Skeleton":
        """Isotropically scaled copy, as used for hand-shape variation."""
        return self.with_lengths(self.lengths * beta)

    def descendants(self) -> np.ndarray:
        """Boolean ``(21, 21)`` matrix; ``[j, d]`` is true when d is strictly below j."""
        if "desc" not in self._cache:
            desc = np.zeros((NUM_JOINTS, NUM_JOINTS), bool)
            for d in range(NUM_JOINTS):
                a = self.parents[d]
                while a >= 0:
                    desc[a, d] = True
                    a = self.parents[a]
            desc.flags.writeable = False
            self._cache["desc"] = desc
        return self._cache["desc"]

    def _plan(self):
        """Level-wise evaluation order plus the per-joint DOF slots."""
        if "plan" not in self._cache:
            depth = np.zeros(NUM_JOINTS, int)
            for j in range(1, NUM_JOINTS):
                depth[j] = depth[self.parents[j]] + 1
            levels = [np.flatnonzero(depth == k) for k in range(1, depth.max() + 1)]
            slots = []
            counters = np.zeros(NUM_JOINTS, int)
            for d, j in enumerate(self.dof_joint):
                k = counters[j]
                counters[j] += 1
                if k == len(slots):
                    slots.append(([], []))
                slots[k][0].append(j)
                slots[k][1].append(d)
            slots = [(np.array(js), np.array(ds)) for js, ds in slots]
            self._cache["plan"] = (levels, slots)
        return self._cache["plan"]


def _validate(s: Skeleton) -> None:
    if len(s.names) != NUM_JOINTS or s.parents.shape != (NUM_JOINTS,):
        raise InvalidInputError(f"skeleton must have {NUM_JOINTS} joints")
    if len(s.dof_names) != NUM_ANGLES or s.dof_joint.shape != (NUM_ANGLES,):
        raise InvalidInputError(f"skeleton must have {NUM_ANGLES} angular DOF")
    if s.parents[0] != -1:
        raise InvalidInputError("joint 0 (wrist) must be the tree root")
    for j in range(1, NUM_JOINTS):
        if not 0 <= s.parents[j] < j:
            raise InvalidInputError(f"joint {s.names[j]}: parent must precede it")
    if not np.all(np.isfinite(s.lengths)) or np.any(s.lengths[1:] <= 0):
        raise InvalidInputError("bone lengths must be finite and strictly positive")
    if s.lengths[0] != 0:
        raise InvalidInputError("the wrist carries no bone; its length must be 0")
    if not np.all(s.limits_lower < s.limits_upper):
        raise InvalidInputError("every joint limit needs lower < upper")
    tips = np.flatnonzero(np.bincount(s.parents[1:], minlength=NUM_JOINTS) == 0)
    if np.any(np.isin(s.dof_joint, tips)) or np.any(s.dof_joint == 0):
        raise InvalidInputError("angular DOF cannot sit on a leaf joint or the wrist")
    if not 0 <= s.root_joint < NUM_JOINTS:
        raise InvalidInputError("root joint out of range")


def load_skeleton(path: str | Path | None = None) -> Skeleton:
    """Load a skeleton config (JSON).  ``None`` loads the bundled default.

    Unknown keys anywhere in the file are rejected.
    """
    if path is None:
        text = resources.files("handtrack.data").joinpath("default_skeleton.json").read_text()
        source = "<default skeleton>"
    else:
        text = Path(path).read_text()
        source = str(path)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: {exc}") from exc
    return skeleton_from_dict(cfg, source)


def _check_keys(obj, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    missing = allowed - set(obj)
    if unknown:
        raise FormatError(f"{where}: unknown fields {sorted(unknown)}")
    if missing:
        raise FormatError(f"{where}: missing fields {sorted(missing)}")


def skeleton_from_dict(cfg: dict, source: str = "<dict>") -> Skeleton:
    _check_keys(cfg, {"format", "version", "root_joint", "joints", "dofs", "limits"}, source)
    if cfg["format"] != SKELETON_FORMAT:
        raise FormatError(f"{source}: not a skeleton file ({cfg['format']!r})")
    if cfg["version"] != SKELETON_VERSION:
        raise VersionMismatchError(f"{source}: unsupported version {cfg['version']}")

    names, parents, directions, lengths = [], [], [], []
    index = {}
    for i, jt in enumerate(cfg["joints"]):
        _check_keys(jt, {"name", "parent", "offset", "length"}, f"{source}: joints[{i}]")
        index[jt["name"]] = i
        names.append(jt["name"])
        if jt["parent"] is None:
            parents.append(-1)
        elif jt["parent"] in index:
            parents.append(index[jt["parent"]])
        else:
            raise FormatError(f"{source}: joint {jt['name']} has unknown parent {jt['parent']!r}")
        offset = np.asarray(jt["offset"], float)
        norm = np.linalg.norm(offset)
        directions.append(offset / norm if norm > 0 else offset)
        lengths.append(float(jt["length"]))

    dof_names, dof_joint, dof_axis = [], [], []
    for i, d in enumerate(cfg["dofs"]):
        _check_keys(d, {"name", "joint", "axis"}, f"{source}: dofs[{i}]")
        if d["joint"] not in index:
            raise FormatError(f"{source}: dof {d['name']} on unknown joint {d['joint']!r}")
        axis = np.asarray(d["axis"], float)
        dof_names.append(d["name"])
        dof_joint.append(index[d["joint"]])
        dof_axis.append(axis / np.linalg.norm(axis))

    limits = cfg["limits"]
    if not isinstance(limits, dict) or set(limits) != set(dof_names):
        raise FormatError(f"{source}: limits must list exactly the DOF names")
    lower = [float(limits[n][0]) for n in dof_names]
    upper = [float(limits[n][1]) for n in dof_names]

    if cfg["root_joint"] not in index:
        raise FormatError(f"{source}: unknown root joint {cfg['root_joint']!r}")
    try:
        return Skeleton(
            names=tuple(names),
            parents=parents,
            directions=directions,
            lengths=lengths,
            dof_names=tuple(dof_names),
            dof_joint=dof_joint,
            dof_axis=dof_axis,
            limits_lower=lower,
            limits_upper=upper,
            root_joint=index[cfg["root_joint"]],
        )
    except InvalidInputError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def skeleton_to_dict(s: Skeleton) -> dict:
    return {
        "format": SKELETON_FORMAT,
        "version": SKELETON_VERSION,
        "root_joint": s.names[s.root_joint],
        "joints": [
            {
                "name": s.names[j],
                "parent": None if s.parents[j] < 0 else s.names[s.parents[j]],
                "offset": s.directions[j].tolist(),
                "length": float(s.lengths[j]),
            }
            for j in range(NUM_JOINTS)
        ],
        "dofs": [
            {"name": n, "joint": s.names[s.dof_joint[d]], "axis": s.dof_axis[d].tolist()}
            for d, n in enumerate(s.dof_names)
        ],
        "limits": {
            n: [float(s.limits_lower[d]), float(s.limits_upper[d])]
            for d, n in enumerate(s.dof_names)
        },
    }


def make_pose(translation=(0.0, 0.0, 0.0), rotation=(0.0, 0.0, 0.0), angles=None) -> np.ndarray:
    pose = np.zeros(NUM_DOF)
    pose[TRANSLATION] = translation
    pose[ROTATION] = rotation
    if angles is not None:
        pose[ANGLES] = angles
    return pose


def check_pose(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (NUM_DOF,):
        raise InvalidInputError(f"pose must have {NUM_DOF} entries, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise InvalidInputError("pose contains non-finite entries")
    return pose


def euler_xyz(angles) -> np.ndarray:
    """Fixed-axis XYZ rotation: rotate about x, then y, then z."""
    return _euler_xyz(angles)[0]


def _euler_xyz(angles):
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx, np.array([Rz @ Ry[:, 0], Rz[:, 1], [0.0, 0.0, 1.0]])


def _cross(a, b):
    """``np.cross`` over the last axis without its dispatch overhead."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _generators(skeleton: Skeleton):
    """Cached ``K`` and ``K @ K`` skew matrices of every DOF axis."""
    if "gen" not in skeleton._cache:
        x, y, z = skeleton.dof_axis.T
        K = np.zeros((NUM_ANGLES, 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -z, y
        K[:, 1, 0], K[:, 1, 2] = z, -x
        K[:, 2, 0], K[:, 2, 1] = -y, x
        skeleton._cache["gen"] = (K, K @ K)
    return skeleton._cache["gen"]


def _kinematics(skeleton: Skeleton, pose: np.ndarray):
    """Positions, world frames, and world-space axes of every rotational DOF."""
    levels, slots = skeleton._plan()
    R_global, global_axes = _euler_xyz(pose[ROTATION])
    K, K2 = _generators(skeleton)
    theta = pose[ANGLES]
    dof_rot = np.eye(3) + np.sin(theta)[:, None, None] * K + (1 - np.cos(theta))[:, None, None] * K2

    local = np.empty((NUM_JOINTS, 3, 3))
    local[:] = np.eye(3)
    prefix_axes = skeleton.dof_axis.copy()
    for k, (js, ds) in enumerate(slots):
        if k:
            # axis of DOF d after the rotations that precede it at its joint
            prefix_axes[ds] = (local[js] @ skeleton.dof_axis[ds][:, :, None])[:, :, 0]
            local[js] = local[js] @ dof_rot[ds]
        else:
            local[js] = dof_rot[ds]

    pos = np.empty((NUM_JOINTS, 3))
    frames = np.empty((NUM_JOINTS, 3, 3))
    pos[0] = pose[TRANSLATION]
    frames[0] = R_global @ local[0]
    offsets = skeleton.offsets[:, :, None]
    parents = skeleton.parents
    for js in levels:
        par = parents[js]
        fp = frames[par]
        pos[js] = pos[par] + (fp @ offsets[js])[:, :, 0]
        frames[js] = fp @ local[js]

    parent_frames = frames[parents[skeleton.dof_joint]]
    world_axes = (parent_frames @ prefix_axes[:, :, None])[:, :, 0]
    return pos, world_axes, global_axes


def forward_kinematics(skeleton: Skeleton, pose) -> np.ndarray:
    """Global ``(21, 3)`` joint positions, mm, for a 26-entry pose."""
    pose = check_pose(pose)
    return _kinematics(skeleton, pose)[0]


def fk_jacobian(skeleton: Skeleton, pose, return_positions: bool = False):
    """Analytical ``(63, 26)`` Jacobian of the flattened joint positions.

    Row ``3*j + c`` is coordinate ``c`` of joint ``j``.  A rotational DOF with
    world axis ``w`` pivoting at joint ``a`` moves a descendant ``d`` at rate
    ``w x (p_d - p_a)``.
    """
    pose = check_pose(pose)
    pos, world_axes, global_axes = _kinematics(skeleton, pose)
    J = np.zeros((NUM_JOINTS, 3, NUM_DOF))
    J[:, :, TRANSLATION] = np.eye(3)
    rel = pos - pos[0]
    J[:, :, ROTATION] = _cross(global_axes[None, :, :], rel[:, None, :]).transpose(0, 2, 1)

    desc = skeleton.descendants()
    pivots = skeleton.dof_joint
    # (20 dofs, 21 joints, 3)
    lever = pos[None, :, :] - pos[pivots][:, None, :]
    cols = _cross(world_axes[:, None, :], lever) * desc[pivots][:, :, None]
    J[:, :, ANGLES] = cols.transpose(1, 2, 0)
    J = J.reshape(3 * NUM_JOINTS, NUM_DOF)
    if return_positions:
        return J, pos
    return J


def bone_vectors(skeleton: Skeleton, positions) -> np.ndarray:
    positions = np.asarray(positions, float)
    return positions[1:] - positions[skeleton.parents[1:]]


def calibrate_bone_lengths(skeleton: Skeleton, frames) -> Skeleton:
    """Set each bone to its mean measured length across ``frames``.

    ``frames`` is a sequence of ``(21, 3)`` joint-position arrays.
    """
    frames = [np.asarray(f, float) for f in frames]
    if not frames:
        raise InvalidInputError("calibration needs at least one frame")
    for f in frames:
        if f.shape != (NUM_JOINTS, 3):
            raise InvalidInputError(f"calibration frame has shape {f.shape}, expected (21, 3)")
    measured = np.stack([np.linalg.norm(bone_vectors(skeleton, f), axis=1) for f in frames])
    mean = measured.mean(axis=0)
    if not np.all(np.isfinite(mean)) or np.any(mean <= 0):
        raise CalibrationError("calibrated bone lengths must be finite and positive")
    return skeleton.with_lengths(np.concatenate([[0.0], mean]))


def random_pose(skeleton: Skeleton, rng: np.random.Generator, translation_scale=50.0,
                rotation_scale=np.pi, depth=500.0) -> np.ndarray:
    """Uniform pose within the joint limits, in front of the camera."""
    pose = np.zeros(NUM_DOF)
    pose[TRANSLATION] = rng.uniform(-translation_scale, translation_scale, 3)
    pose[2] += depth
    pose[ROTATION] = rng.uniform(-rotation_scale, rotation_scale, 3)
    pose[ANGLES] = rng.uniform(skeleton.limits_lower, skeleton.limits_upper)
    return pose
