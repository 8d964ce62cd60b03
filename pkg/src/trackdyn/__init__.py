"""Single-track vehicle dynamics inside a sliding-window estimator, with online model calibration.

The package simulates a small car, estimates its trajectory from synthetic
odometry and gyro data, calibrates the dynamics parameters offline and online,
and evaluates tracking and prediction accuracy.
"""

from .calibration import CalibResult, calibrate_stage1, calibrate_stage2
from .config import ExperimentConfig, load_config
from .dynamics import (
    ControlSample,
    DynamicsParams,
    LongitudinalHyperParams,
    VehicleGeometry,
    VehicleState2D,
    lateral_forces,
    longitudinal_force,
    slip_angles,
    soft_threshold,
    state_derivative,
)
from .errors import (
    AlignmentFailure,
    ControlError,
    EmptyAfterTrim,
    FactorEvaluationFailure,
    FileError,
    NearPiRotation,
    NonFiniteState,
    NotForwardMotion,
    OutOfOrderFrame,
    SchemaError,
    SolverFailure,
    TrackDynError,
)
from .estimator import EstimatorConfig, SlidingWindowEstimator, run_estimator
from .evaluation import (
    RpeReport,
    Trajectory,
    prediction_rpe,
    tracking_rpe,
    trim_standing_tail,
)
from .fileio import load_dataset, save_dataset
from .geometry import (
    Pose3,
    body_velocity,
    geometry_residual,
    plane_residual,
    project_planar,
    relative_body_pose,
)
from .integration import ControlTimeline, integrate_interval, predict, rollout
from .simulation import SimConfig, SimOutput, make_script, simulate
from .window import WindowGraph

__version__ = "0.1.0"

__all__ = [
    "AlignmentFailure",
    "CalibResult",
    "ControlError",
    "ControlSample",
    "ControlTimeline",
    "DynamicsParams",
    "EmptyAfterTrim",
    "EstimatorConfig",
    "ExperimentConfig",
    "FactorEvaluationFailure",
    "FileError",
    "LongitudinalHyperParams",
    "NearPiRotation",
    "NonFiniteState",
    "NotForwardMotion",
    "OutOfOrderFrame",
    "Pose3",
    "RpeReport",
    "SchemaError",
    "SimConfig",
    "SimOutput",
    "SlidingWindowEstimator",
    "SolverFailure",
    "TrackDynError",
    "Trajectory",
    "VehicleGeometry",
    "VehicleState2D",
    "WindowGraph",
    "body_velocity",
    "calibrate_stage1",
    "calibrate_stage2",
    "geometry_residual",
    "integrate_interval",
    "lateral_forces",
    "load_config",
    "load_dataset",
    "longitudinal_force",
    "make_script",
    "plane_residual",
    "predict",
    "prediction_rpe",
    "project_planar",
    "relative_body_pose",
    "rollout",
    "run_estimator",
    "save_dataset",
    "simulate",
    "slip_angles",
    "soft_threshold",
    "state_derivative",
    "tracking_rpe",
    "trim_standing_tail",
]
