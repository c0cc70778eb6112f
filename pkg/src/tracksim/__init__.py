"""Closed-loop quadrotor target-tracking stack: synthetic perception
(depth completion, adaptive zoom, obstacle selection), error-state UKF
relative-state estimation, and CBF-constrained NMPC, plus a deterministic
desk-scale simulator and CLI.
"""

__version__ = "0.1.0"

from .depth import (
    DepthFrame,
    DisparityFit,
    DisparityFrame,
    StereoGeometry,
    TargetDepthEstimate,
    complete_depth,
    estimate_target_depth,
    fit_disparity_polynomial,
)
from .dynamics import QuadrotorParams, continuous_dynamics, hover_state, rk4_step
from .geometry import (
    CameraIntrinsics,
    FramedPoint,
    RigidTransform,
    T_BC,
    UnitQuaternion,
    back_project,
    body_to_target,
    camera_to_body,
    project,
)
from .nmpc import CbfConfig, CostWeights, NmpcController, OcpConfig, cbf_terms, solve_ocp
from .obstacles import ObstaclePoint, RobotExtent, TtcMap, compute_ttc_map, select_obstacles
from .reference import ReferenceConfig, ReferenceGenerator
from .scenario import ScenarioError, load_scenario
from .ukf import EstimatorState, ImuSample, UkfNoiseConfig, VisionMeasurement, predict, update_vision
from .world import RunLog, Scenario, WorldModel, step_scenario
from .zoom import BBox, CropWindow, Detection, ZoomConfig, ZoomState, compute_crop

__all__ = [
    "__version__",
    "BBox",
    "CameraIntrinsics",
    "CbfConfig",
    "CostWeights",
    "CropWindow",
    "DepthFrame",
    "Detection",
    "DisparityFit",
    "DisparityFrame",
    "EstimatorState",
    "FramedPoint",
    "ImuSample",
    "NmpcController",
    "ObstaclePoint",
    "OcpConfig",
    "QuadrotorParams",
    "ReferenceConfig",
    "ReferenceGenerator",
    "RigidTransform",
    "RobotExtent",
    "RunLog",
    "Scenario",
    "ScenarioError",
    "StereoGeometry",
    "T_BC",
    "TargetDepthEstimate",
    "TtcMap",
    "UkfNoiseConfig",
    "UnitQuaternion",
    "VisionMeasurement",
    "WorldModel",
    "ZoomConfig",
    "ZoomState",
    "back_project",
    "body_to_target",
    "camera_to_body",
    "cbf_terms",
    "complete_depth",
    "compute_crop",
    "compute_ttc_map",
    "continuous_dynamics",
    "estimate_target_depth",
    "fit_disparity_polynomial",
    "hover_state",
    "load_scenario",
    "predict",
    "project",
    "rk4_step",
    "select_obstacles",
    "solve_ocp",
    "step_scenario",
    "update_vision",
]
