"""Sparse-view cone-beam vessel reconstruction with a 3D Gaussian model."""

__version__ = "0.1.0"

from .config import MetricConfig, RunConfig, load_config, save_config
from .fbp import FbpConfig, extract_init_points, fbp_reconstruct
from .gaussians import (ComposeConfig, GaussianCloud, compose_gradients,
                        compose_volume)
from .geometry import ConeBeamGeometry, ViewSchedule, make_schedule
from .io import (load_cloud, load_points, load_volume, save_cloud,
                 save_points, save_volume)
from .metrics import (PointCloud, chamfer, cldice_loss, eval_mask, masked_dsc,
                      masked_psnr, skeletonize3d, ssim3d)
from .optimize import (DensityControlConfig, OptimizerConfig, ReconLossConfig,
                       ReconResult, ReconstructionError,
                       extract_centerline_mask, recon_loss, reconstruct)
from .phantom import (TreeParams, VesselTree, build_dataset, generate_tree,
                      voxelize_tree)
from .projector import ProjectionSet, VoxelGrid, backproject, forward_project

__all__ = [
    "ComposeConfig", "ConeBeamGeometry", "DensityControlConfig", "FbpConfig",
    "GaussianCloud", "MetricConfig", "OptimizerConfig", "PointCloud",
    "ProjectionSet", "ReconLossConfig", "ReconResult", "ReconstructionError",
    "RunConfig", "TreeParams", "VesselTree", "ViewSchedule", "VoxelGrid",
    "backproject", "build_dataset", "chamfer", "cldice_loss",
    "compose_gradients", "compose_volume", "eval_mask",
    "extract_centerline_mask", "extract_init_points", "fbp_reconstruct",
    "forward_project", "generate_tree", "load_cloud", "load_config",
    "load_points", "load_volume", "make_schedule", "masked_dsc",
    "masked_psnr", "recon_loss", "reconstruct", "save_cloud", "save_config",
    "save_points", "save_volume", "skeletonize3d", "ssim3d", "voxelize_tree",
]
