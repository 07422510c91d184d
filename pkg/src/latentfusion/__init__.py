"""LiDAR-camera fusion with scale-matched stages and latent cross-modal interaction."""

from .autodiff import Tape, Tensor, finite_diff_check
from .errors import ContractError, EmptyFrameError, FusionError, ParseError, ShapeError
from .geometry import Calibration, FeatureMap, parse_kitti_calib, project_points
from .latent import EcmiParams, dense_oracle_ecmi, ecmi, fuse_head, qkv_cross_attention
from .pipeline import FusionConfig, Toggles, generate_synthetic_scene, init_params, run_pipeline
from .voxel import VoxelConfig, VoxelSet, voxelize

__all__ = [
    "Calibration",
    "ContractError",
    "EcmiParams",
    "EmptyFrameError",
    "FeatureMap",
    "FusionConfig",
    "FusionError",
    "ParseError",
    "ShapeError",
    "Tape",
    "Tensor",
    "Toggles",
    "VoxelConfig",
    "VoxelSet",
    "dense_oracle_ecmi",
    "ecmi",
    "finite_diff_check",
    "fuse_head",
    "generate_synthetic_scene",
    "init_params",
    "parse_kitti_calib",
    "project_points",
    "qkv_cross_attention",
    "run_pipeline",
    "voxelize",
]
