"""``handtrack`` command line: synth, track, eval, ablate, gradcheck.

Every flag can also be set through an environment variable named
``HANDTRACK_`` plus the flag name in upper case with dashes turned into
underscores (``--noise-mm`` -> ``HANDTRACK_NOISE_MM``).  Explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .camera import Camera, crop_side, default_camera
from .errors import (
    FormatError,
    HandTrackError,
    InvalidInputError,
    MissingGroundTruthError,
    NoDataError,
    VersionMismatchError,
)
from .evaluation import (
    ABLATION_VARIANTS,
    ablation_csv,
    ablation_report,
    metric_report,
    poses_to_positions,
)
from .localization import CONF_THRESHOLD, DEFAULT_DELTA, JUMP_THRESHOLD_PX, LocalizerState, update_root
from .optimizer import (
    ITERATIONS,
    VARIANTS,
    EnergyWeights,
    TrackerState,
    gradient_check,
    track_frame,
    variant_weights,
)
from .skeleton import NUM_DOF, NUM_JOINTS, Skeleton, load_skeleton
from .synth import SynthConfig, generate_sequence, read_observation_stream, write_observation_stream

ENV_PREFIX = "HANDTRACK_"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MALFORMED = 3
EXIT_VERSION = 4
EXIT_NO_GROUND_TRUTH = 5
EXIT_IO = 6
EXIT_INVALID_INPUT = 7
EXIT_CHECK_FAILED = 8

GRADCHECK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class RunConfig:
    """Validated arguments of one invocation."""

    subcommand: str
    stream: Path | None = None
    poses: Path | None = None
    skeleton: Path | None = None
    camera: Path | None = None
    weights: Path | None = None
    out: Path | None = None
    seed: int = 0
    frames: int = 200
    occlusion_rate: float = 0.0
    noise_mm: float = 25.0
    outlier_rate: float = 0.0
    shape_scale: float = 1.0
    variant: str = "full"
    method: str = "gauss-newton"
    iterations: int = ITERATIONS
    w_p3: float | None = None
    w_p2: float | None = None
    w_l: float | None = None
    w_t: float | None = None
    length_unit_mm: float | None = None
    delta: float = DEFAULT_DELTA
    conf_threshold: float = CONF_THRESHOLD
    jump_threshold: float = JUMP_THRESHOLD_PX
    k_crop: float | None = None
    sequences: int = 3
    configs: int = 100

    def validate(self) -> None:
        needs_stream = {"track", "eval"}
        if self.subcommand in needs_stream and self.stream is None:
            raise InvalidInputError(f"{self.subcommand} needs --stream")
        for p in (self.stream, self.poses, self.skeleton, self.camera, self.weights):
            if p is not None and not p.is_file():
                raise OSError(f"{p}: no such file")
        if self.subcommand in ("synth", "track", "eval", "ablate") and self.out is None:
            raise InvalidInputError(f"{self.subcommand} needs --out")
        if self.frames < 1 or self.sequences < 1 or self.configs < 1 or self.iterations < 0:
            raise InvalidInputError("--frames, --sequences and --configs must be >= 1")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")


def _env_default(name: str, default):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)

    def opt(flag, type_, default, help_):
        common.add_argument(f"--{flag}", type=type_, default=_env_default(flag, default), help=help_)

    opt("skeleton", Path, None, "skeleton JSON (default: bundled template)")
    opt("camera", Path, None, "camera JSON (default: 320x240 depth camera)")
    opt("weights", Path, None, "JSON object with any of w_p3, w_p2, w_l, w_t, length_unit_mm")
    opt("stream", Path, None, "observation stream to read")
    opt("poses", Path, None, "poses.csv written by 'track' (eval only; otherwise tracks)")
    opt("out", Path, None, "output file (synth) or directory")
    opt("seed", int, 0, "random seed")
    opt("frames", int, 200, "frames per synthetic sequence")
    opt("occlusion-rate", float, 0.0, "probability a fingertip is occluded")
    opt("noise-mm", float, 25.0, "half-width of uniform 3D prediction noise")
    opt("outlier-rate", float, 0.0, "probability of a spurious root heatmap")
    opt("shape-scale", float, 1.0, "hand size factor for synthetic data")
    opt("variant", str, "full", f"energy variant: {', '.join(VARIANTS)}")
    opt("method", str, "gauss-newton", "step conditioning: gauss-newton or diagonal")
    opt("iterations", int, ITERATIONS, "optimizer iterations per frame")
    opt("w-p3", float, None, "3D position weight")
    opt("w-p2", float, None, "2D position weight")
    opt("w-l", float, None, "joint limit weight")
    opt("w-t", float, None, "temporal weight")
    opt("length-unit-mm", float, None, "length unit of the residuals")
    opt("delta", float, DEFAULT_DELTA, "root extrapolation decay factor")
    opt("conf-threshold", float, CONF_THRESHOLD, "root likelihood threshold")
    opt("jump-threshold", float, JUMP_THRESHOLD_PX, "root jump threshold in px")
    opt("k-crop", float, None, "crop constant (default fx * 300 mm)")
    opt("sequences", int, 3, "ablate: synthetic sequences when no --stream is given")
    opt("configs", int, 100, "gradcheck: random configurations")

    parser = argparse.ArgumentParser(prog="handtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic observation stream")
    sub.add_parser("track", parents=[common], help="track a stream; write poses and timing")
    sub.add_parser("eval", parents=[common], help="score tracking against ground truth")
    sub.add_parser("ablate", parents=[common], help="compare energy variants and raw predictions")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    return parser


def parse_config(argv=None) -> RunConfig:
    ns = build_parser().parse_args(argv)
    kw = {f.name: getattr(ns, f.name) for f in fields(RunConfig) if hasattr(ns, f.name)}
    types = {f.name: f.type for f in fields(RunConfig)}
    for name, value in kw.items():
        # env defaults arrive as strings
        if isinstance(value, str) and name not in ("subcommand", "variant", "method"):
            kind = types[name]
            conv = int if "int" in kind else float if "float" in kind else Path
            kw[name] = conv(value)
    return RunConfig(**kw)


# -- loading --------------------------------------------------------------------

def _load_json(path: Path, what: str) -> dict:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed {what} JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: {what} must be a JSON object")
    return data


def load_camera(path: Path | None) -> Camera:
    if path is None:
        return default_camera()
    try:
        return Camera.from_dict(_load_json(path, "camera"))
    except (TypeError, InvalidInputError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_weights(cfg: RunConfig) -> EnergyWeights:
    w = EnergyWeights()
    if cfg.weights is not None:
        data = _load_json(cfg.weights, "weights")
        allowed = {f.name for f in fields(EnergyWeights)}
        unknown = set(data) - allowed
        if unknown:
            raise FormatError(f"{cfg.weights}: unknown weights {sorted(unknown)}")
        w = replace(w, **{k: float(v) for k, v in data.items()})
    overrides = {k: getattr(cfg, k) for k in ("w_p3", "w_p2", "w_l", "w_t", "length_unit_mm")
                 if getattr(cfg, k) is not None}
    return variant_weights(replace(w, **overrides), cfg.variant)


def _load_skeleton(cfg: RunConfig) -> Skeleton:
    return load_skeleton(cfg.skeleton)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


POSE_COLUMNS = (["frame", "crop_side_px"] + [f"theta_{i}" for i in range(NUM_DOF)]
                + [f"{c}{j}" for j in range(NUM_JOINTS) for c in "xyz"])
TIMING_COLUMNS = ("frame", "localize_ms", "fit_ms", "total_ms")


# -- subcommands ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    skel = _load_skeleton(cfg)
    camera = load_camera(cfg.camera)
    sc = SynthConfig(sequence_length=cfg.frames, position_noise=cfg.noise_mm, root_noise=cfg.noise_mm,
                     occlusion_rate=cfg.occlusion_rate, heatmap_outlier_rate=cfg.outlier_rate,
                     shape_scale=cfg.shape_scale, seed=cfg.seed)
    obs, truth = generate_sequence(skel, camera, sc)
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=cfg.out.parent, prefix=f".{cfg.out.name}.")
    os.close(fd)
    try:
        write_observation_stream(tmp, obs, truth, camera)
        os.replace(tmp, cfg.out)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    print(f"wrote {len(obs)} frames to {cfg.out}")
    return EXIT_OK


def _track(cfg: RunConfig, skel: Skeleton, obs, camera: Camera):
    weights = load_weights(cfg)
    loc = LocalizerState(delta=cfg.delta, conf_threshold=cfg.conf_threshold,
                         jump_threshold=cfg.jump_threshold)
    state = TrackerState()
    poses, crops, timing = [], [], []
    for t, o in enumerate(obs):
        t0 = time.perf_counter()
        side = 0
        if o.root_heatmap is not None:
            _, loc = update_root(loc, o.root_heatmap)
            side = crop_side(camera, float(o.root_3d[2]), cfg.k_crop)
        t1 = time.perf_counter()
        pose, state = track_frame(skel, o, state, camera, weights, cfg.method, cfg.iterations)
        t2 = time.perf_counter()
        poses.append(pose)
        crops.append(side)
        timing.append((t, (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t2 - t0) * 1e3))
    return np.array(poses).reshape(-1, NUM_DOF), crops, timing


def cmd_track(cfg: RunConfig) -> int:
    skel = _load_skeleton(cfg)
    camera = load_camera(cfg.camera)
    obs, _, stream_camera = read_observation_stream(cfg.stream, camera if cfg.camera else None)
    poses, crops, timing = _track(cfg, skel, obs, stream_camera)
    positions = poses_to_positions(skel, poses).reshape(len(poses), -1)
    rows = ([t, crops[t], *(f"{x:.10g}" for x in poses[t]), *(f"{x:.10g}" for x in positions[t])]
            for t in range(len(poses)))
    # build everything before touching the output directory
    pose_text = _csv_text(POSE_COLUMNS, rows)
    timing_text = _csv_text(TIMING_COLUMNS, ([t, *(f"{x:.4f}" for x in r)] for t, *r in timing))
    _atomic_write(cfg.out / "poses.csv", pose_text)
    _atomic_write(cfg.out / "timing.csv", timing_text)
    ms = np.array([r[1:] for r in timing]) if timing else np.zeros((1, 3))
    print(f"tracked {len(poses)} frames; mean ms per frame: localize {ms[:, 0].mean():.3f}, "
          f"fit {ms[:, 1].mean():.3f}, total {ms[:, 2].mean():.3f}")
    return EXIT_OK


def read_poses_csv(path: Path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != POSE_COLUMNS:
                raise FormatError(f"{path}: unexpected pose table columns")
            rows = [r for r in reader]
        return np.array([[float(x) for x in r[2: 2 + NUM_DOF]] for r in rows]).reshape(-1, NUM_DOF)
    except (StopIteration, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed pose table: {exc}") from exc


def _require_truth(truth, path) -> None:
    if not truth or any(g is None for g in truth):
        raise MissingGroundTruthError(f"{path}: stream lacks ground truth")


def cmd_eval(cfg: RunConfig) -> int:
    skel = _load_skeleton(cfg)
    camera = load_camera(cfg.camera)
    obs, truth, stream_camera = read_observation_stream(cfg.stream, camera if cfg.camera else None)
    _require_truth(truth, cfg.stream)
    if cfg.poses is not None:
        poses = read_poses_csv(cfg.poses)
        if len(poses) != len(obs):
            raise InvalidInputError(f"{cfg.poses}: {len(poses)} poses for {len(obs)} frames")
    else:
        poses, _, _ = _track(cfg, skel, obs, stream_camera)
    report = metric_report(poses_to_positions(skel, poses), np.array([g.positions for g in truth]),
                           stream_camera)
    _atomic_write(cfg.out / "per_frame.csv", report.per_frame_csv())
    _atomic_write(cfg.out / "curve.csv", report.curve_csv())
    _atomic_write(cfg.out / "summary.csv", report.summary_csv())
    for name, s in report.summary.items():
        print(f"{name}: mean {s['mean']:.6g}  median {s['median']:.6g}  std {s['std']:.6g}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    skel = _load_skeleton(cfg)
    camera = load_camera(cfg.camera)
    weights = load_weights(replace(cfg, variant="full"))
    rows = []
    if cfg.stream is not None:
        obs, truth, stream_camera = read_observation_stream(cfg.stream, camera if cfg.camera else None)
        _require_truth(truth, cfg.stream)
        rows += ablation_report(skel, obs, truth, stream_camera, weights, ABLATION_VARIANTS,
                                sequence=cfg.stream.stem, method=cfg.method)
    else:
        for k in range(cfg.sequences):
            sc = SynthConfig(sequence_length=cfg.frames, position_noise=cfg.noise_mm,
                             root_noise=cfg.noise_mm, occlusion_rate=cfg.occlusion_rate,
                             shape_scale=cfg.shape_scale, seed=cfg.seed + k)
            obs, truth = generate_sequence(skel, camera, sc)
            rows += ablation_report(skel, obs, truth, camera, weights, ABLATION_VARIANTS,
                                    sequence=f"seed{cfg.seed + k}", method=cfg.method)
    text = ablation_csv(rows)
    _atomic_write(cfg.out / "ablation.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    skel = _load_skeleton(cfg)
    camera = load_camera(cfg.camera)
    worst = gradient_check(skel, camera, load_weights(cfg), configs=cfg.configs, seed=cfg.seed)
    for name, err in worst.items():
        print(f"{name:9s} max relative error {err:.3e}")
    overall = max(worst.values())
    print(f"max relative error {overall:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if overall < GRADCHECK_TOLERANCE else EXIT_CHECK_FAILED


COMMANDS = {"synth": cmd_synth, "track": cmd_track, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


# most specific first: VersionMismatchError is a FormatError
ERROR_CODES = (
    (VersionMismatchError, EXIT_VERSION, "version mismatch"),
    (FormatError, EXIT_MALFORMED, "malformed file"),
    (MissingGroundTruthError, EXIT_NO_GROUND_TRUTH, "missing ground truth"),
    ((InvalidInputError, NoDataError), EXIT_INVALID_INPUT, "invalid input"),
    (OSError, EXIT_IO, "i/o error"),
    (HandTrackError, EXIT_ERROR, "error"),
)


def run(cfg: RunConfig) -> int:
    """Execute one config; map every error class to its exit code."""
    try:
        cfg.validate()
        return COMMANDS[cfg.subcommand](cfg)
    except (HandTrackError, OSError) as exc:
        for cls, code, kind in ERROR_CODES:
            if isinstance(exc, cls):
                print(f"handtrack: {kind}: {exc}", file=sys.stderr)
                return code
        raise


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ValueError as exc:
        print(f"handtrack: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
