"""Kinematic pose-tracking energy and its minimisation.

The energy is a weighted sum of squared residuals::

    E = w_p3 * sum_j |M(pose)_j - pG_j|^2          3D fit
      + w_p2 * sum_j |proj(M(pose)_j) - peak_j|^2   2D fit against heatmap maxima
      + w_l  * sum_i dist(theta_i, [lo_i, hi_i])^2  soft joint limits
      + w_t  * |pose - 2 pose_prev + pose_prev2|^2  constant-velocity prior

3D distances (and translations inside the temporal term) are measured in
units of ``EnergyWeights.length_unit_mm`` millimetres; 2D distances are in
pixels and angles in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import Camera, RootLocation, project, project_jacobian
from .errors import InvalidInputError, NoDataError
from .localization import Heatmap, refined_peak
from .skeleton import (
    ANGLES,
    NUM_DOF,
    NUM_JOINTS,
    TRANSLATION,
    Skeleton,
    check_pose,
    fk_jacobian,
    forward_kinematics,
    make_pose,
    random_pose,
)

TERMS = ("pos3d", "pos2d", "limits", "temporal")
ITERATIONS = 20
MAX_HALVINGS = 8
STEP_TOLERANCE = 1e-10  # mm / rad


@dataclass(frozen=True)
class EnergyWeights:
    w_p3: float = 0.01
    w_p2: float = 5e-7
    w_l: float = 0.03
    w_t: float = 1e-3
    length_unit_mm: float = 1.0

    def __post_init__(self):
        for name in ("w_p3", "w_p2", "w_l", "w_t"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"weight {name} must be >= 0")
        if not self.length_unit_mm > 0:
            raise InvalidInputError("length_unit_mm must be positive")

    def weight(self, term: str) -> float:
        return {"pos3d": self.w_p3, "pos2d": self.w_p2, "limits": self.w_l, "temporal": self.w_t}[term]


# Ablation variants: which data terms stay on.  Regularisers are kept in all.
VARIANTS = {
    "full": {},
    "3d-only": {"w_p2": 0.0},
    "2d-only": {"w_p3": 0.0},
}


def variant_weights(weights: EnergyWeights, variant: str) -> EnergyWeights:
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return replace(weights, **VARIANTS[variant])


@dataclass(frozen=True, eq=False)
class Observation:
    """Per-frame stand-in for the network outputs.

    ``joint_maxima`` caches the 2D heatmap peak of every joint in image
    pixels; it is filled from ``joint_heatmaps`` when not given.
    """

    local_positions: np.ndarray  # (21, 3) root-relative, mm
    root_3d: np.ndarray  # (3,) mm
    validity_mask: np.ndarray  # (21,) bool
    root: RootLocation | None = None
    joint_heatmaps: tuple[Heatmap, ...] | None = None
    joint_maxima: np.ndarray | None = None
    root_heatmap: Heatmap | None = None

    def __post_init__(self):
        lp = np.asarray(self.local_positions, float)
        r = np.asarray(self.root_3d, float)
        mask = np.asarray(self.validity_mask, bool)
        if lp.shape != (NUM_JOINTS, 3) or r.shape != (3,) or mask.shape != (NUM_JOINTS,):
            raise InvalidInputError("observation arrays have the wrong shape")
        if not np.all(np.isfinite(lp[mask])) or not np.all(np.isfinite(r)):
            raise InvalidInputError("observation has non-finite values on valid joints")
        object.__setattr__(self, "local_positions", lp)
        object.__setattr__(self, "root_3d", r)
        object.__setattr__(self, "validity_mask", mask)
        if self.joint_maxima is None and self.joint_heatmaps is not None:
            if len(self.joint_heatmaps) != NUM_JOINTS:
                raise InvalidInputError("need one heatmap per joint")
            peaks = np.array([refined_peak(h)[:2] for h in self.joint_heatmaps])
            object.__setattr__(self, "joint_maxima", peaks)
        elif self.joint_maxima is not None:
            object.__setattr__(self, "joint_maxima", np.asarray(self.joint_maxima, float))

    @property
    def global_positions(self) -> np.ndarray:
        return self.local_positions + self.root_3d


@dataclass(frozen=True, eq=False)
class TrackerState:
    theta_prev: np.ndarray | None = None
    theta_prev2: np.ndarray | None = None
    frame_index: int = 0

    @property
    def has_velocity(self) -> bool:
        return self.theta_prev is not None and self.theta_prev2 is not None

    def shifted(self, pose) -> "TrackerState":
        return TrackerState(np.array(pose, float), self.theta_prev, self.frame_index + 1)


def _length_scale(weights: EnergyWeights) -> np.ndarray:
    s = np.ones(NUM_DOF)
    s[TRANSLATION] = 1.0 / weights.length_unit_mm
    return s


def term_residuals(skeleton: Skeleton, pose, obs: Observation, state: TrackerState | None,
                   camera: Camera, weights: EnergyWeights, jacobian: bool = True):
    """Unweighted residual blocks ``{term: (r, J)}`` with ``term = sum(r**2)``.

    ``J`` is ``None`` when ``jacobian`` is false.  Terms that do not apply this
    frame (no valid joint, no 2D maxima, no velocity history) are omitted.
    """
    pose = check_pose(pose)
    if jacobian:
        J, pos = fk_jacobian(skeleton, pose, return_positions=True)
        J = J.reshape(NUM_JOINTS, 3, NUM_DOF)
    else:
        pos, J = forward_kinematics(skeleton, pose), None
    mask = obs.validity_mask
    out = {}
    unit = weights.length_unit_mm

    if mask.any():
        r = (pos[mask] - obs.global_positions[mask]).ravel() / unit
        out["pos3d"] = (r, J[mask].reshape(-1, NUM_DOF) / unit if jacobian else None)

    if obs.joint_maxima is not None and mask.any():
        pts = pos[mask]
        r = (project(camera, pts) - obs.joint_maxima[mask]).ravel()
        Jp = None
        if jacobian:
            Jp = np.einsum("nij,njk->nik", project_jacobian(camera, pts), J[mask]).reshape(-1, NUM_DOF)
        out["pos2d"] = (r, Jp)

    theta = pose[ANGLES]
    clipped = np.clip(theta, skeleton.limits_lower, skeleton.limits_upper)
    r = theta - clipped
    Jl = None
    if jacobian:
        Jl = np.zeros((theta.size, NUM_DOF))
        Jl[:, ANGLES] = np.diag((r != 0).astype(float))
    out["limits"] = (r, Jl)

    if state is not None and state.has_velocity:
        s = _length_scale(weights)
        r = s * (pose - 2 * state.theta_prev + state.theta_prev2)
        out["temporal"] = (r, np.diag(s) if jacobian else None)
    return out


def _weighted_stack(blocks, weights: EnergyWeights):
    rs, Js = [], []
    for name, (r, J) in blocks.items():
        w = np.sqrt(weights.weight(name))
        rs.append(w * r)
        if J is not None:
            Js.append(w * J)
    r = np.concatenate(rs)
    return r, (np.vstack(Js) if Js else None)


def _require_data(obs: Observation) -> None:
    if not obs.validity_mask.any():
        raise NoDataError("no valid joint in this observation")


def energy(skeleton: Skeleton, pose, obs: Observation, state: TrackerState | None,
           camera: Camera, weights: EnergyWeights) -> tuple[float, np.ndarray]:
    """Total tracking energy and its exact gradient with respect to the 26 pose entries."""
    _require_data(obs)
    r, J = _weighted_stack(term_residuals(skeleton, pose, obs, state, camera, weights), weights)
    return float(r @ r), 2.0 * J.T @ r


def energy_value(skeleton, pose, obs, state, camera, weights) -> float:
    _require_data(obs)
    blocks = term_residuals(skeleton, pose, obs, state, camera, weights, jacobian=False)
    r, _ = _weighted_stack(blocks, weights)
    return float(r @ r)


def energy_breakdown(skeleton, pose, obs, state, camera, weights) -> dict[str, float]:
    """Unweighted value of every active term."""
    blocks = term_residuals(skeleton, pose, obs, state, camera, weights, jacobian=False)
    return {name: float(r @ r) for name, (r, _) in blocks.items()}


DIAGONAL_SCALES = {"translation": 1.0, "rotation": 1e-4, "angles": 1e-4}


def _diagonal_preconditioner() -> np.ndarray:
    d = np.full(NUM_DOF, DIAGONAL_SCALES["angles"])
    d[0:3] = DIAGONAL_SCALES["translation"]
    d[3:6] = DIAGONAL_SCALES["rotation"]
    return d


@dataclass
class OptimizeInfo:
    energies: list = field(default_factory=list)
    halvings: list = field(default_factory=list)


def optimize_pose(skeleton: Skeleton, obs: Observation, state: TrackerState | None,
                  camera: Camera, weights: EnergyWeights, init, iterations: int = ITERATIONS,
                  method: str = "gauss-newton", max_halvings: int = MAX_HALVINGS,
                  return_info: bool = False):
    """Conditioned gradient descent with backtracking, a fixed number of iterations.

    Each iteration steps along ``-P @ grad``.  ``method="gauss-newton"`` uses
    ``P = (2 J^T J + damping)^-1`` built from the residual Jacobian;
    ``method="diagonal"`` uses fixed per-parameter-type scales
    (:data:`DIAGONAL_SCALES`).  A step is halved up to ``max_halvings`` times
    until the energy does not increase; if none qualifies the pose is kept.
    """
    _require_data(obs)
    if method not in ("gauss-newton", "diagonal"):
        raise InvalidInputError(f"unknown method {method!r}")
    pose = check_pose(init).copy()
    info = OptimizeInfo()
    blocks = term_residuals(skeleton, pose, obs, state, camera, weights)
    r, J = _weighted_stack(blocks, weights)
    e = float(r @ r)
    info.energies.append(e)
    diag = _diagonal_preconditioner()
    for _ in range(iterations):
        grad = 2.0 * J.T @ r
        if method == "diagonal":
            step = -diag * grad
        else:
            H = 2.0 * J.T @ J
            hd = np.diag(H)
            H[np.diag_indices_from(H)] += 1e-9 * hd + 1e-12 * (1.0 + hd.max())
            step = -np.linalg.solve(H, grad)
        if np.max(np.abs(step)) < STEP_TOLERANCE:
            # converged: the remaining iterations could not move the pose measurably
            break
        accepted = None
        for h in range(max_halvings + 1):
            cand = pose + step * 0.5**h
            blocks_c = term_residuals(skeleton, cand, obs, state, camera, weights, jacobian=False)
            rc, _ = _weighted_stack(blocks_c, weights)
            ec = float(rc @ rc)
            if ec <= e:
                accepted = (cand, ec, h)
                break
        if accepted is None:
            # the pose is unchanged, so every remaining iteration would repeat this one
            info.halvings.append(None)
            info.energies.append(e)
            break
        pose, e, h = accepted
        info.halvings.append(h)
        info.energies.append(e)
        r, J = _weighted_stack(term_residuals(skeleton, pose, obs, state, camera, weights), weights)
    if return_info:
        return pose, info
    return pose


def initial_pose(skeleton: Skeleton, obs: Observation) -> np.ndarray:
    """Rest-pose angles, rigidly aligned to the observed palm.

    Palm joints (the wrist and its children) do not move with the finger
    angles, so a rigid fit of the rest template to their observed positions
    gives the global rotation.  With fewer than three valid palm joints the
    rotation stays at identity and only the root joint is moved onto
    ``obs.root_3d``.
    """
    rest = forward_kinematics(skeleton, make_pose())
    palm = np.flatnonzero((skeleton.parents <= 0) & obs.validity_mask)
    if palm.size < 3:
        return make_pose(translation=obs.root_3d - rest[skeleton.root_joint])
    src = rest[palm]
    dst = obs.global_positions[palm]
    rot, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
    R = rot.as_matrix()
    translation = dst.mean(0) - R @ src.mean(0)
    return make_pose(translation=translation, rotation=rot.as_euler("xyz"))


def track_frame(skeleton: Skeleton, obs: Observation, state: TrackerState, camera: Camera,
                weights: EnergyWeights, method: str = "gauss-newton", iterations: int = ITERATIONS):
    """Refine one frame, warm-started from the previous pose.

    Returns ``(pose, next_state)``.  Without usable joints the previous pose is
    held (coasting); on the very first frame that raises :class:`NoDataError`.
    """
    if not obs.validity_mask.any():
        if state.theta_prev is None:
            raise NoDataError("first frame has no valid joint to initialise from")
        return state.theta_prev.copy(), state.shifted(state.theta_prev)
    init = initial_pose(skeleton, obs) if state.theta_prev is None else state.theta_prev
    pose = optimize_pose(skeleton, obs, state, camera, weights, init,
                         iterations=iterations, method=method)
    return pose, state.shifted(pose)


def track_sequence(skeleton, observations, camera, weights, method="gauss-newton",
                   iterations: int = ITERATIONS):
    """Track a whole stream from an empty state; returns a ``(T, 26)`` array."""
    state = TrackerState()
    poses = []
    for obs in observations:
        pose, state = track_frame(skeleton, obs, state, camera, weights, method, iterations)
        poses.append(pose)
    return np.array(poses).reshape(-1, NUM_DOF)


FD_STEP_MM = 1e-3
FD_STEP_RAD = 1e-6


def _fd_gradient(f, pose, steps) -> np.ndarray:
    g = np.empty(NUM_DOF)
    for i in range(NUM_DOF):
        e = np.zeros(NUM_DOF)
        e[i] = steps[i]
        g[i] = (f(pose + e) - f(pose - e)) / (2 * steps[i])
    return g


def _relative_error(g, g_ref) -> float:
    scale = np.max(np.abs(g_ref))
    diff = np.max(np.abs(g - g_ref))
    if scale == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return float(diff / scale)


def gradient_check(skeleton: Skeleton, camera: Camera, weights: EnergyWeights | None = None,
                   configs: int = 100, seed: int = 0) -> dict[str, float]:
    """Max relative error of analytic against central-difference gradients.

    Poses are drawn uniformly inside the joint limits and the observation,
    previous poses and 2D maxima are perturbed copies of a second random pose,
    so every term has non-trivial residuals.  Relative error is measured in
    the max norm over the 26 entries.  Keys are the term names plus
    ``"total"`` for the weighted sum.
    """
    weights = weights or EnergyWeights()
    rng = np.random.default_rng(seed)
    steps = np.full(NUM_DOF, FD_STEP_RAD)
    steps[TRANSLATION] = FD_STEP_MM
    worst = {name: 0.0 for name in (*TERMS, "total")}
    for _ in range(configs):
        pose = random_pose(skeleton, rng)
        other = random_pose(skeleton, rng)
        target = forward_kinematics(skeleton, other) + rng.uniform(-25, 25, (NUM_JOINTS, 3))
        target[:, 2] = np.maximum(target[:, 2], 1.0)
        root = target[skeleton.root_joint].copy()
        obs = Observation(local_positions=target - root, root_3d=root,
                          validity_mask=rng.uniform(size=NUM_JOINTS) < 0.9,
                          joint_maxima=project(camera, target) + rng.uniform(-5, 5, (NUM_JOINTS, 2)))
        if not obs.validity_mask.any():
            continue
        state = TrackerState(other + rng.normal(0, 0.05, NUM_DOF), other)
        blocks = term_residuals(skeleton, pose, obs, state, camera, weights)
        for name, (r, J) in blocks.items():
            def f(p, name=name):
                rr = term_residuals(skeleton, p, obs, state, camera, weights, jacobian=False)[name][0]
                return float(rr @ rr)
            err = _relative_error(2.0 * J.T @ r, _fd_gradient(f, pose, steps))
            worst[name] = max(worst[name], err)
        _, g = energy(skeleton, pose, obs, state, camera, weights)
        g_fd = _fd_gradient(lambda p: energy_value(skeleton, p, obs, state, camera, weights), pose, steps)
        worst["total"] = max(worst["total"], _relative_error(g, g_fd))
    return worst
