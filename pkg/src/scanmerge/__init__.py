"""Scan planning, view synthesis and joint merging of laser scans with SfM reconstructions."""

from .geometry import CameraIntrinsics, CameraView, ColoredPointCloud, RigidPose, Sim3Transform, TriMesh
from .merge import MergeProblem, compute_omega, problem_from_cameras, solve
from .metrics import precision_recall_fscore, rms_reference_error
from .planner import plan_locations, visibility_records
from .registration import ransac_sim3, umeyama_sim3

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraView",
    "ColoredPointCloud",
    "MergeProblem",
    "RigidPose",
    "Sim3Transform",
    "TriMesh",
    "compute_omega",
    "plan_locations",
    "precision_recall_fscore",
    "problem_from_cameras",
    "ransac_sim3",
    "rms_reference_error",
    "solve",
    "umeyama_sim3",
    "visibility_records",
]
