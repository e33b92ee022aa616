"""Occupancy submaps with correspondence-free LiDAR residuals for factor-graph SLAM."""

from .geometry import Pose, PosePerturbation, Rotation, apply_perturbation, compose, exp_so3, log_so3
from .kernels import BACKEND, available_backends
from .occupancy import OccupancySubmap, SensorModelParams, inverse_sensor_model
from .lidar_residual import LidarFactorTerm, evaluate_batch
from .factor_graph import LidarFactor, Problem, RelativePoseFactor, SolverConfig, optimize
from .submapping import LidarScan, SubmapConfig, SubmapRegistry, deskew, overlap_ratio

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "LidarFactor", "LidarFactorTerm", "LidarScan", "OccupancySubmap", "Pose", "PosePerturbation",
    "Problem", "RelativePoseFactor", "Rotation", "SensorModelParams", "SolverConfig", "SubmapConfig",
    "SubmapRegistry", "apply_perturbation", "available_backends", "compose", "deskew", "evaluate_batch",
    "exp_so3", "inverse_sensor_model", "log_so3", "optimize", "overlap_ratio",
]
