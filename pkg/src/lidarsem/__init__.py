"""Semantic classification of LiDAR points into non-movable, movable and dynamic.

Per-pixel objectness from a range-image scorer is fused with rigid scene-flow
motion cues in a per-point Bayes filter.
"""

from .bayes_filter import Belief, FilterConfig, classify, dynamicity, step
from .cluster_eval import Box3D, average_precision, cluster_points, fit_box, iou3d, pr_curve
from .errors import ConfigError, DataError, FormatError, LidarSemError, NumericalError
from .geometry import Pose
from .pipeline import PipelineConfig
from .pixel_scorer import ScorerModel, TrainConfig, predict, train
from .projection import ProjectionConfig, back_project, project
from .rigid_flow import FlowConfig, MotionField, estimate_flow
from .scan_io import CLASS_NAMES, PointCloud, read_labels, read_poses, read_velodyne_bin, write_labels

__version__ = "0.1.0"

__all__ = [
    "Belief", "Box3D", "CLASS_NAMES", "ConfigError", "DataError", "FilterConfig", "FlowConfig", "FormatError",
    "LidarSemError", "MotionField", "NumericalError", "PipelineConfig", "PointCloud", "Pose", "ProjectionConfig",
    "ScorerModel", "TrainConfig", "average_precision", "back_project", "classify", "cluster_points",
    "dynamicity", "estimate_flow", "fit_box", "iou3d", "pr_curve", "predict", "project", "read_labels",
    "read_poses", "read_velodyne_bin", "step", "train", "write_labels",
]
