"""Desk-scale point-cloud pre-training with differentiable Gaussian splatting.

A point backbone fused with frozen 2D image features predicts per-point
Gaussian primitives; a tile-based splatting renderer with a hand-derived
backward pass supplies pixel-level gradients. Everything runs in float64
NumPy on a CPU and is verified against brute-force oracles and central
finite differences.
"""

from .autodiff import (ParameterStore, Tape, Var, adam_step, leaf,
                       load_checkpoint, save_checkpoint, step_lr)
from .camera import (Camera, Extrinsics, Intrinsics, PixelCorrespondence,
                     backproject_depth, load_cameras, look_at, project_points,
                     save_cameras)
from .config import RunConfig, default_config, load_config, parse, save_config, serialize
from .data import (SceneSample, ViewSplit, generate_object_sample,
                   generate_scene_sample, load_sample, save_sample, select_views)
from .errors import (CameraError, ConfigError, DatasetIOError, DimensionError,
                     InputError, NumericError, RotationError, SelectionError)
from .fusion import (MergedPointSet, gather_point_features, object_feature_fusion,
                     scene_point_fusion)
from .gaussians import (GaussianGrads, GaussianSet, DecodeConfig, decode_backward,
                        decode_gaussians, sh_color)
from .gradcheck import decode_fd_report, render_fd_report, run_gradcheck, tape_fd_report
from .image_branch import AdaptationBlock, FrozenExtractor, FrozenExtractorConfig
from .losses import compute_fg_mask, mse_loss, psnr, weighted_object_loss
from .pipeline import (PretrainModel, eval_model, load_model, probe, save_model,
                       train, training_step)
from .pointcloud import PointCloud
from .renderer import RenderOutput, oracle_render, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "AdaptationBlock", "Camera", "CameraError", "ConfigError", "DatasetIOError",
    "DecodeConfig", "DimensionError", "Extrinsics", "FrozenExtractor",
    "FrozenExtractorConfig", "GaussianGrads", "GaussianSet", "InputError",
    "Intrinsics", "MergedPointSet", "NumericError", "ParameterStore",
    "PixelCorrespondence", "PointCloud", "PretrainModel", "RenderOutput",
    "RotationError", "RunConfig", "SceneSample", "SelectionError", "Tape", "Var",
    "ViewSplit", "adam_step", "backproject_depth", "compute_fg_mask",
    "decode_backward", "decode_fd_report", "decode_gaussians", "default_config",
    "eval_model", "gather_point_features", "generate_object_sample",
    "generate_scene_sample", "leaf", "load_cameras", "load_checkpoint",
    "load_config", "load_model", "load_sample", "look_at", "mse_loss",
    "object_feature_fusion", "oracle_render", "parse", "probe",
    "project_points", "psnr", "render", "render_backward", "render_fd_report",
    "run_gradcheck", "save_cameras", "save_checkpoint", "save_config",
    "save_model", "save_sample", "scene_point_fusion", "select_views",
    "serialize", "sh_color", "step_lr", "tape_fd_report", "train",
    "training_step", "weighted_object_loss",
]
