"""Kinematic hand-pose tracking from per-frame joint predictions."""

from .camera import Camera, Frame, RootLocation, backproject, crop, default_camera, project
from .errors import (
    BehindCameraError,
    CalibrationError,
    DepthHoleError,
    FormatError,
    HandTrackError,
    InvalidDepthError,
    InvalidInputError,
    MissingGroundTruthError,
    NoDataError,
    VersionMismatchError,
)
from .evaluation import ablation_report, joint_error_3d, metric_report, threshold_curve
from .localization import Heatmap, LocalizerState, update_root
from .optimizer import EnergyWeights, Observation, TrackerState, energy, optimize_pose, track_frame
from .skeleton import (
    Skeleton,
    calibrate_bone_lengths,
    fk_jacobian,
    forward_kinematics,
    load_skeleton,
    make_pose,
)
from .synth import SynthConfig, generate_sequence

__version__ = "0.1.0"
