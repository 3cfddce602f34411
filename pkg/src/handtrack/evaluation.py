"""Error metrics, threshold curves and ablation tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, project
from .errors import InvalidInputError
from .localization import Heatmap, LocalizerState, argmax, update_root
from .optimizer import EnergyWeights, VARIANTS, track_sequence, variant_weights
from .skeleton import NUM_JOINTS, Skeleton, forward_kinematics

FINGERTIPS = np.array([4, 8, 12, 16, 20])
DEFAULT_THRESHOLDS_MM = np.arange(0.0, 101.0, 5.0)
ABLATION_VARIANTS = ("full", "3d-only", "2d-only", "raw")


def _subset_indices(subset) -> np.ndarray:
    if subset is None or (isinstance(subset, str) and subset == "all"):
        return np.arange(NUM_JOINTS)
    if isinstance(subset, str):
        if subset == "fingertips":
            return FINGERTIPS
        raise InvalidInputError(f"unknown joint subset {subset!r}")
    idx = np.asarray(subset, int).ravel()
    if idx.size == 0:
        raise InvalidInputError("joint subset is empty")
    return idx


def joint_error_3d(pred, truth, subset="all") -> float:
    """Mean Euclidean distance between matching joints of ``pred`` and ``truth``.

    ``subset`` is ``"all"``, ``"fingertips"`` or a sequence of joint indices.
    """
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidInputError(f"position shapes differ or are not (n, 3): {pred.shape} vs {truth.shape}")
    idx = _subset_indices(subset)
    if idx.min() < -pred.shape[0] or idx.max() >= pred.shape[0]:
        raise InvalidInputError("joint subset index out of range")
    return float(np.linalg.norm(pred[idx] - truth[idx], axis=1).mean())


def joint_error_2d(pred_uv, truth_uv) -> float:
    """Mean pixel distance between matching 2D points."""
    pred_uv = np.asarray(pred_uv, float)
    truth_uv = np.asarray(truth_uv, float)
    if pred_uv.shape != truth_uv.shape or pred_uv.size == 0:
        raise InvalidInputError("2D point sets must be non-empty and equally shaped")
    return float(np.linalg.norm(pred_uv - truth_uv, axis=-1).mean())


def threshold_curve(errors, thresholds) -> np.ndarray:
    """Fraction of ``errors`` at or below each threshold."""
    errors = np.asarray(errors, float).ravel()
    thresholds = np.asarray(thresholds, float).ravel()
    if thresholds.size == 0:
        raise InvalidInputError("no thresholds given")
    if np.any(np.diff(thresholds) < 0):
        raise InvalidInputError("thresholds must be sorted ascending")
    if errors.size == 0:
        raise InvalidInputError("no errors given")
    ordered = np.sort(errors)
    return np.searchsorted(ordered, thresholds, side="right") / errors.size


def jitter(positions) -> float:
    """Mean frame-to-frame joint displacement of a ``(T, J, 3)`` track."""
    positions = np.asarray(positions, float)
    if positions.ndim != 3 or positions.shape[0] < 2:
        raise InvalidInputError("jitter needs a (T>=2, J, 3) position track")
    return float(np.linalg.norm(np.diff(positions, axis=0), axis=2).mean())


def _summary(x: np.ndarray) -> dict[str, float]:
    return {"mean": float(np.mean(x)), "median": float(np.median(x)), "std": float(np.std(x))}


@dataclass
class MetricReport:
    """Per-frame errors, a threshold curve on the 3D error and summary stats."""

    frames: np.ndarray
    error_3d: np.ndarray  # mm, all joints
    error_2d: np.ndarray  # px, all joints
    error_tips: np.ndarray  # mm, fingertips
    thresholds: np.ndarray
    curve: np.ndarray
    summary: dict = field(default_factory=dict)

    PER_FRAME_COLUMNS = ("frame", "error_3d_mm", "error_2d_px", "fingertip_3d_mm")
    CURVE_COLUMNS = ("threshold_mm", "fraction")
    SUMMARY_COLUMNS = ("metric", "mean", "median", "std")

    def per_frame_csv(self) -> str:
        rows = zip(self.frames, self.error_3d, self.error_2d, self.error_tips)
        return _csv(self.PER_FRAME_COLUMNS, ([int(f), *map(float, r)] for f, *r in rows))

    def curve_csv(self) -> str:
        return _csv(self.CURVE_COLUMNS, zip(map(float, self.thresholds), map(float, self.curve)))

    def summary_csv(self) -> str:
        return _csv(self.SUMMARY_COLUMNS,
                    ([k, v["mean"], v["median"], v["std"]] for k, v in self.summary.items()))


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def metric_report(predicted, truth, camera: Camera, thresholds=DEFAULT_THRESHOLDS_MM) -> MetricReport:
    """Score a ``(T, 21, 3)`` predicted track against ``(T, 21, 3)`` ground truth."""
    predicted = np.asarray(predicted, float)
    truth = np.asarray(truth, float)
    if predicted.shape != truth.shape or predicted.ndim != 3 or predicted.shape[0] == 0:
        raise InvalidInputError(f"track shapes differ or are empty: {predicted.shape} vs {truth.shape}")
    e3 = np.linalg.norm(predicted - truth, axis=2)
    uv_pred = project(camera, predicted.reshape(-1, 3)).reshape(predicted.shape[0], -1, 2)
    uv_true = project(camera, truth.reshape(-1, 3)).reshape(truth.shape[0], -1, 2)
    e2 = np.linalg.norm(uv_pred - uv_true, axis=2)
    error_3d = e3.mean(axis=1)
    error_tips = e3[:, FINGERTIPS].mean(axis=1)
    error_2d = e2.mean(axis=1)
    thresholds = np.asarray(thresholds, float)
    return MetricReport(
        frames=np.arange(len(error_3d)),
        error_3d=error_3d,
        error_2d=error_2d,
        error_tips=error_tips,
        thresholds=thresholds,
        curve=threshold_curve(error_3d, thresholds),
        summary={"error_3d_mm": _summary(error_3d), "error_2d_px": _summary(error_2d),
                 "fingertip_3d_mm": _summary(error_tips)},
    )


def poses_to_positions(skeleton: Skeleton, poses) -> np.ndarray:
    return np.array([forward_kinematics(skeleton, p) for p in np.asarray(poses, float)])


def raw_positions(observations) -> np.ndarray:
    """Per-frame predictions ``p^L + r`` without any fitting."""
    return np.array([o.global_positions for o in observations])


@dataclass(frozen=True)
class AblationRow:
    sequence: str
    variant: str
    fingertip_error_mm: float
    joint_error_mm: float
    jitter_mm: float


ABLATION_COLUMNS = ("sequence", "variant", "fingertip_error_mm", "joint_error_mm", "jitter_mm")


def ablation_report(skeleton: Skeleton, observations, truth, camera: Camera,
                    weights: EnergyWeights | None = None, variants=ABLATION_VARIANTS,
                    sequence: str = "seq", method: str = "gauss-newton") -> list[AblationRow]:
    """Track one stream under each variant and score it against ground truth.

    ``"raw"`` scores the per-frame predictions directly; the other names are
    keys of :data:`~handtrack.optimizer.VARIANTS`.
    """
    weights = weights or EnergyWeights()
    gt = np.array([g.positions for g in truth])
    if len(observations) != len(gt):
        raise InvalidInputError("observations and ground truth differ in length")
    rows = []
    for v in variants:
        if v == "raw":
            X = raw_positions(observations)
        elif v in VARIANTS:
            poses = track_sequence(skeleton, observations, camera, variant_weights(weights, v), method)
            X = poses_to_positions(skeleton, poses)
        else:
            raise InvalidInputError(f"unknown variant {v!r}")
        err = np.linalg.norm(X - gt, axis=2)
        rows.append(AblationRow(sequence, v, float(err[:, FINGERTIPS].mean()), float(err.mean()),
                                jitter(X) if len(X) > 1 else 0.0))
    return rows


def ablation_csv(rows) -> str:
    return _csv(ABLATION_COLUMNS, ([r.sequence, r.variant, r.fingertip_error_mm, r.joint_error_mm,
                                    r.jitter_mm] for r in rows))


def root_tracking_errors(observations, truth, localizer: LocalizerState | None = None):
    """Mean root 2D error (px) of raw argmax and of the gated, decayed localizer."""
    state = localizer or LocalizerState()
    raw_err, filt_err = [], []
    for obs, gt in zip(observations, truth):
        hm = obs.root_heatmap
        if not isinstance(hm, Heatmap):
            raise InvalidInputError("observation has no root heatmap")
        u, v, _ = argmax(hm)
        loc, state = update_root(state, hm)
        raw_err.append(np.hypot(u - gt.root_uv[0], v - gt.root_uv[1]))
        filt_err.append(np.hypot(loc.u - gt.root_uv[0], loc.v - gt.root_uv[1]))
    return float(np.mean(raw_err)), float(np.mean(filt_err))
