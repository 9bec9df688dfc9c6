"""Gaussian-cloud reconstruction from sparse measured views.

The loop is: compose the cloud into a volume, project it, score against
the measured views with a centerline-weighted squared loss, pull the
per-pixel cotangent back through the projector adjoint, turn it into
per-parameter gradients, and take an adaptive-moment step.  Periodic
density control prunes invisible components and splits ones whose
centers keep receiving large gradients.

The whole loop is deterministic: no random draws, fixed kernel
partitioning, fixed iteration order.  Two runs from the same inputs
produce identical loss traces.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gaussians import (CloudGradients, ComposeConfig, GaussianCloud,
                        compose_gradients, compose_volume, inv_softplus)
from .geometry import ConeBeamGeometry
from .metrics import PointCloud, skeletonize3d
from .projector import ProjectionSet, VoxelGrid, backproject, forward_project

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "loss_l2", "loss_cl", "loss_total", "gaussian_count")


class ReconstructionError(RuntimeError):
    """Raised when the optimization produces a non-finite loss."""


def extract_centerline_mask(projection: np.ndarray,
                            threshold_frac: float = 0.1) -> np.ndarray:
    """Binarize at threshold_frac * max, then thin to a 1-pixel skeleton."""
    img = np.asarray(projection, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("projection must be finite")
    peak = img.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    binary = img >= threshold_frac * peak
    return skeletonize3d(binary)


@dataclass
class ReconLossConfig:
    alpha: float = 0.5
    masks: np.ndarray | None = None      # (views, rows, cols) binary

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.masks is not None:
            self.masks = np.ascontiguousarray(self.masks, dtype=np.float64)
            vals = np.unique(self.masks)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError("masks must be binary")

    def with_masks_from(self, meas: ProjectionSet) -> "ReconLossConfig":
        masks = np.stack([extract_centerline_mask(im) for im in meas.images])
        return ReconLossConfig(alpha=self.alpha, masks=masks.astype(np.float64))


@dataclass
class LossBreakdown:
    total: float
    l2: float
    cl: float
    cotangent: np.ndarray   # dL/dPred, same shape as the projection stack


def recon_loss(pred: ProjectionSet, meas: ProjectionSet,
               cfg: ReconLossConfig) -> LossBreakdown:
    """alpha * |res|^2 + (1 - alpha) * |res * mask|^2 summed over views."""
    if pred.images.shape != meas.images.shape:
        raise ValueError("prediction/measurement shape mismatch")
    if cfg.masks is None or cfg.masks.shape != meas.images.shape:
        raise ValueError("need one binary mask per view")
    res = pred.images - meas.images
    masked = res * cfg.masks
    l2 = float(np.sum(res * res))
    cl = float(np.sum(masked * masked))
    total = cfg.alpha * l2 + (1.0 - cfg.alpha) * cl
    cot = 2.0 * cfg.alpha * res + 2.0 * (1.0 - cfg.alpha) * masked * cfg.masks
    return LossBreakdown(total=total, l2=l2, cl=cl, cotangent=cot)


@dataclass
class OptimizerConfig:
    iterations: int = 10000
    lr_center_rel: float = 2e-3     # scaled by the scene extent at runtime
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_intensity: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lr_center_rel", "lr_scale", "lr_rotation", "lr_intensity", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decays must be in [0, 1)")

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("iterations", "lr_center_rel", "lr_scale", "lr_rotation",
                 "lr_intensity", "beta1", "beta2", "eps")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DensityControlConfig:
    enabled: bool = True
    interval: int = 100
    prune_intensity_frac: float = 1e-3
    split_grad_threshold: float = 2e-4
    split_scale_factor: float = 1.6
    max_gaussians: int = 20000

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("density control interval must be >= 1")
        for name in ("prune_intensity_frac", "split_grad_threshold", "split_scale_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be >= 1")

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("enabled", "interval", "prune_intensity_frac",
                 "split_grad_threshold", "split_scale_factor", "max_gaussians")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_from_pointcloud(points: PointCloud, geom: ConeBeamGeometry,
                         measured_max: float,
                         init_scale_voxels: float = 1.5,
                         init_intensity_frac: float = 0.1) -> GaussianCloud:
    """One isotropic Gaussian per seed point.

    Points outside the volume box are clipped onto it (and counted in the
    log); duplicates stay duplicated, density control separates them.
    """
    if points.count == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if measured_max <= 0:
        raise ValueError("measured projections carry no signal")
    lo = np.asarray(geom.volume_origin)
    hi = lo + np.asarray(geom.volume_shape) * geom.voxel_size
    centers = np.clip(points.points, lo, hi)
    n_clipped = int(np.sum(np.any(centers != points.points, axis=1)))
    if n_clipped:
        log.info("clipped %d/%d seed points into the volume", n_clipped, points.count)
    n = points.count
    sigma = init_scale_voxels * geom.voxel_size
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    raw = float(inv_softplus(init_intensity_frac * measured_max))
    return GaussianCloud(centers, np.full((n, 3), np.log(sigma)), quats,
                         np.full(n, raw))


def _density_control(cloud: GaussianCloud, accum_grad_norm: np.ndarray,
                     cfg: DensityControlConfig):
    """Returns (new cloud, parent index per new row; -1 marks split children)."""
    n = cloud.count
    intens = cloud.intensities
    keep = intens >= cfg.prune_intensity_frac * intens.max()
    if not keep.any():
        keep[int(np.argmax(intens))] = True       # never drop to an empty cloud
    idx = np.flatnonzero(keep)
    split = idx[accum_grad_norm[idx] > cfg.split_grad_threshold]
    room = max(0, cfg.max_gaussians - idx.size)
    if split.size > room:
        # closest to the cap: split the largest offenders first
        order = np.argsort(-accum_grad_norm[split], kind="stable")
        split = split[order[:room]]
        split = np.sort(split)
    survivors = np.setdiff1d(idx, split)
    parts = [cloud.select(survivors)]
    parents = [survivors]
    if split.size:
        parent = cloud.select(split)
        rot = _rotation_columns(parent)
        axis_idx = np.argmax(parent.log_scales, axis=1)
        sigma_max = np.exp(np.take_along_axis(parent.log_scales, axis_idx[:, None], 1))[:, 0]
        axes = rot[np.arange(split.size), :, axis_idx]
        offset = axes * sigma_max[:, None]
        child_scales = parent.log_scales - np.log(cfg.split_scale_factor)
        child_raw = inv_softplus(0.5 * parent.intensities)
        for sgn in (1.0, -1.0):
            parts.append(GaussianCloud(parent.centers + sgn * offset, child_scales,
                                       parent.rotations, child_raw))
            parents.append(np.full(split.size, -1, dtype=np.int64))
    merged = GaussianCloud.concatenate(parts)
    return merged, np.concatenate(parents)


def _rotation_columns(cloud: GaussianCloud):
    from .gaussians import _rotation_matrices
    return _rotation_matrices(cloud.normalized_rotations())


def density_control_step(cloud: GaussianCloud, accum_grad_norm,
                         cfg: DensityControlConfig) -> GaussianCloud:
    """Prune dim Gaussians; split persistently pushed ones along their
    largest principal axis (children offset by +/- one std-dev, scales
    shrunk, intensity mass preserved)."""
    accum = np.asarray(accum_grad_norm, dtype=np.float64).reshape(-1)
    if accum.shape[0] != cloud.count:
        raise ValueError("gradient accumulator does not match the cloud")
    if cloud.count == 0:
        return cloud
    merged, _ = _density_control(cloud, accum, cfg)
    return merged


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, name, shape):
        if name not in self.m or self.m[name].shape != shape:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)

    def remap(self, parents: np.ndarray):
        """Carry moments through density control; new rows start at zero."""
        for name in list(self.m):
            old_m, old_v = self.m[name], self.v[name]
            new_m = np.zeros((parents.shape[0],) + old_m.shape[1:])
            new_v = np.zeros_like(new_m)
            src = parents >= 0
            new_m[src] = old_m[parents[src]]
            new_v[src] = old_v[parents[src]]
            self.m[name], self.v[name] = new_m, new_v

    def update(self, name, param, grad, lr, beta1, beta2, eps):
        m = self.m[name]
        v = self.v[name]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        mh = m / (1 - beta1 ** self.step)
        vh = v / (1 - beta2 ** self.step)
        param -= lr * mh / (np.sqrt(vh) + eps)


@dataclass
class ReconResult:
    cloud: GaussianCloud
    volume: VoxelGrid
    trace: np.ndarray          # (iterations + 1, 5), TRACE_COLUMNS order
    masks: np.ndarray


def reconstruct(meas: ProjectionSet, init,
                loss_cfg: ReconLossConfig | None = None,
                opt_cfg: OptimizerConfig | None = None,
                density_cfg: DensityControlConfig | None = None,
                compose_cfg: ComposeConfig | None = None) -> ReconResult:
    """Full reconstruction loop from measured views and a seed.

    ``init`` may be a PointCloud (seeded via init_from_pointcloud) or an
    already-built GaussianCloud.  Raises ReconstructionError if the loss
    goes non-finite.
    """
    if meas.n_views < 1:
        raise ValueError("need at least one measured view")
    geom = meas.geometry
    loss_cfg = loss_cfg or ReconLossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    density_cfg = density_cfg or DensityControlConfig()
    compose_cfg = compose_cfg or ComposeConfig()
    if loss_cfg.masks is None:
        loss_cfg = loss_cfg.with_masks_from(meas)

    if isinstance(init, GaussianCloud):
        cloud = init.copy()
    else:
        cloud = init_from_pointcloud(init, geom, float(meas.images.max()))

    scene_extent = max(geom.volume_extent)
    lr = {"centers": opt_cfg.lr_center_rel * scene_extent,
          "log_scales": opt_cfg.lr_scale,
          "rotations": opt_cfg.lr_rotation,
          "raw_intensities": opt_cfg.lr_intensity}
    scale_floor_log = np.log(compose_cfg.scale_floor(geom.voxel_size))

    adam = AdamState()
    accum_grad = np.zeros(cloud.count)
    accum_steps = 0
    trace = np.zeros((opt_cfg.iterations + 1, 5))

    def evaluate(curr: GaussianCloud):
        vol = compose_volume(curr, geom, compose_cfg)
        pred = forward_project(vol, geom, meas.angles)
        return vol, recon_loss(pred, meas, loss_cfg)

    vol = None
    for it in range(opt_cfg.iterations):
        vol, loss = evaluate(cloud)
        if not np.isfinite(loss.total):
            raise ReconstructionError(
                f"non-finite loss {loss.total!r} at iteration {it} "
                f"({cloud.count} gaussians)")
        trace[it] = (it, loss.l2, loss.cl, loss.total, cloud.count)

        upstream = backproject(ProjectionSet(geom, meas.angles, loss.cotangent))
        grads = compose_gradients(cloud, geom, compose_cfg, upstream)

        adam.step += 1
        for name in lr:
            g = getattr(grads, name)
            p = getattr(cloud, name)
            adam.ensure(name, p.shape)
            adam.update(name, p, g, lr[name], opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
        cloud.renormalize()
        np.maximum(cloud.log_scales, scale_floor_log, out=cloud.log_scales)

        accum_grad += np.linalg.norm(grads.centers, axis=1)
        accum_steps += 1

        if (density_cfg.enabled and (it + 1) % density_cfg.interval == 0
                and it + 1 < opt_cfg.iterations):
            mean_grad = accum_grad / max(1, accum_steps)
            cloud, parents = _density_control(cloud, mean_grad, density_cfg)
            adam.remap(parents)
            accum_grad = np.zeros(cloud.count)
            accum_steps = 0

    vol, loss = evaluate(cloud)
    if not np.isfinite(loss.total):
        raise ReconstructionError(f"non-finite final loss {loss.total!r}")
    trace[opt_cfg.iterations] = (opt_cfg.iterations, loss.l2, loss.cl,
                                 loss.total, cloud.count)
    return ReconResult(cloud=cloud, volume=vol, trace=trace, masks=loss_cfg.masks)


def write_loss_trace(path: str, trace: np.ndarray):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])),
                             repr(float(row[3])), int(row[4])])


def read_loss_trace(path: str) -> np.ndarray:
    import csv
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace columns {header}")
        return np.array([[float(c) for c in row] for row in reader])
