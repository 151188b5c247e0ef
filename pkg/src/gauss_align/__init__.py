"""Colored point-cloud registration with Gaussian superpoints.

A coarse stage aligns Gaussian splats built on voxel superpoints with a
softmax correspondence matrix and a covariance-weighted SVD solve; a fine
stage refines the pose by gradient descent on a rendered photometric loss.
"""

from .coarse import CoarseConfig, CoarseResult, coarse_register, correspondence_matrix, weighted_svd_align
from .color import ColorSpace, convert_color, encode_color, fuse_features
from .datasets import (CameraCalibration, SyntheticPairSpec, colorize_scan, generate_pair, generate_twin_rooms,
                       read_ply, write_ply)
from .fine import FineConfig, FineResult, fine_register, photometric_loss, se3_photometric_gradient
from .geometry import ColoredPointCloud, RigidTransform, se3_exp, se3_log, so3_exp, so3_log
from .metrics import MetricsReport, MetricThresholds, pose_errors
from .pipeline import RegistrationResult, RunConfig, register
from .splats import GaussianSplat, SplatSet, build_splat, fit_low_rank

__version__ = "0.1.0"

__all__ = [
    "CameraCalibration", "CoarseConfig", "CoarseResult", "ColorSpace", "ColoredPointCloud", "FineConfig",
    "FineResult", "GaussianSplat", "MetricThresholds", "MetricsReport", "RegistrationResult", "RigidTransform",
    "RunConfig", "SplatSet", "SyntheticPairSpec", "build_splat", "coarse_register", "colorize_scan",
    "convert_color", "correspondence_matrix", "encode_color", "fine_register", "fit_low_rank", "fuse_features",
    "generate_pair", "generate_twin_rooms", "photometric_loss", "pose_errors", "read_ply", "register",
    "se3_exp", "se3_log", "se3_photometric_gradient", "so3_exp", "so3_log", "weighted_svd_align", "write_ply",
]
