"""Learned seed-point initialization for the Gaussian reconstruction engine."""

__version__ = "0.1.0"

from .geometry import Geometry, cell_ray_frame, unproject
from .losses import (DepthLossConfig, LossSchedule, chamfer, depth_loss,
                     soft_cldice, soft_cldice_batch, soft_skeleton, splat_points, total_loss)
from .model import CenterNet, activate
from .predict import predict_dataset, predict_points
from .training import TrainConfig, load_checkpoint, train

__all__ = [
    "CenterNet", "DepthLossConfig", "Geometry", "LossSchedule", "TrainConfig",
    "activate", "cell_ray_frame", "chamfer", "depth_loss", "load_checkpoint",
    "predict_dataset", "predict_points", "soft_cldice", "soft_cldice_batch", "soft_skeleton",
    "splat_points", "total_loss", "train", "unproject",
]
