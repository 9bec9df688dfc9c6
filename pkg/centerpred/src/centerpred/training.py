"""Training loop: one projection in, per-cell depth and offsets out.

Supervision per sample: pooled first-hit depth (depth term), the
phantom's vessel support points (point-matching term), and its binary
occupancy grid (soft tubular term on the splatted prediction).  The
point term is schedule-gated; see :class:`losses.LossSchedule`.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dataio
from .geometry import Geometry, cell_ray_frame, unproject
from .losses import (DepthLossConfig, LossSchedule, chamfer, depth_loss,
                     soft_cldice_batch, soft_skeleton, splat_points, total_loss)
from .model import CenterNet, activate

CURVE_COLUMNS = ("step", "point_weight", "loss_point", "loss_tube",
                 "loss_depth", "loss_total")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    channels: tuple = (16, 32, 64)
    alpha_ds: int = 4
    tube_downsample: int = 2       # clDice grid coarsening, for CPU budgets
    skeleton_iters: int = 3
    max_gt_points: int = 2048      # chamfer target subsample, for CPU budgets
    log_every: int = 25
    schedule: LossSchedule = field(default_factory=LossSchedule)
    depth_cfg: DepthLossConfig = field(default_factory=DepthLossConfig)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.tube_downsample < 1:
            raise ValueError("tube_downsample must be >= 1")


class PhantomViews(torch.utils.data.Dataset):
    """(case, view) pairs of an engine dataset directory."""

    def __init__(self, dataset_dir: str, alpha_ds: int, tube_downsample: int,
                 max_gt_points: int = 2048, skeleton_iters: int = 3):
        self.dir = dataset_dir
        self.manifest = dataio.load_manifest(dataset_dir)
        self.geom = Geometry.from_dict(self.manifest["geometry"])
        self.alpha_ds = alpha_ds
        self.tube_downsample = tube_downsample
        self.max_gt_points = max_gt_points
        self.skeleton_iters = skeleton_iters
        self.items = []
        for ci, entry in enumerate(self.manifest["samples"]):
            if "volume" not in entry.get("files", {}):
                raise ValueError("training needs datasets with stored volumes")
            for vi in range(len(entry["angles"])):
                self.items.append((ci, vi))
        self._tube_cache: dict = {}
        self._point_cache: dict = {}

    def __len__(self):
        return len(self.items)

    def _pool_depth(self, depth: np.ndarray, mask: np.ndarray):
        """Average valid pixels per cell; a cell is valid if any pixel is."""
        a = self.alpha_ds
        h, w = depth.shape
        d = np.where(mask > 0, depth, 0.0).reshape(h // a, a, w // a, a)
        m = (mask > 0).reshape(h // a, a, w // a, a)
        cnt = m.sum(axis=(1, 3))
        dsum = d.sum(axis=(1, 3))
        valid = cnt > 0
        cell = np.where(valid, dsum / np.maximum(cnt, 1), 0.0)
        return cell.astype(np.float32), valid.astype(np.float32)

    def _tube_grid(self, ci: int, paths: dict):
        if ci not in self._tube_cache:
            vol, _ = dataio.read_array(paths["volume"])
            occ = (vol > 0).astype(np.float32)
            ds = self.tube_downsample
            if ds > 1:
                nx, ny, nz = (s // ds for s in occ.shape)
                occ = occ[:nx * ds, :ny * ds, :nz * ds]
                occ = occ.reshape(nx, ds, ny, ds, nz, ds).max(axis=(1, 3, 5))
            tube = torch.from_numpy(occ)
            # gt skeleton never changes, so pay the pooling chain once
            with torch.no_grad():
                skel = soft_skeleton(tube[None, None], self.skeleton_iters)[0, 0]
            self._tube_cache[ci] = (tube, skel)
        return self._tube_cache[ci]

    def __getitem__(self, idx: int):
        ci, vi = self.items[idx]
        entry = self.manifest["samples"][ci]
        paths = dataio.sample_paths(self.dir, entry)
        proj, _ = dataio.read_array(paths["projections"][vi])
        depth, _ = dataio.read_array(paths["depths"][vi])
        mask, _ = dataio.read_array(paths["masks"][vi])
        cell_d, cell_m = self._pool_depth(depth, mask)
        if ci not in self._point_cache:
            pts = dataio.read_pointcloud(paths["points"])[:, :3]
            if self.max_gt_points and pts.shape[0] > self.max_gt_points:
                # deterministic thinning keeps the chamfer target tractable
                keep = np.random.default_rng(ci).choice(
                    pts.shape[0], self.max_gt_points, replace=False)
                pts = pts[np.sort(keep)]
            self._point_cache[ci] = torch.from_numpy(pts.astype(np.float32))
        tube, tube_skel = self._tube_grid(ci, paths)
        return {
            "proj": torch.from_numpy(proj.astype(np.float32))[None],
            "depth": torch.from_numpy(cell_d),
            "valid": torch.from_numpy(cell_m),
            "angle": float(entry["angles"][vi]),
            "points": self._point_cache[ci],
            "tube": tube,
            "tube_skel": tube_skel,
        }


def _collate(batch):
    return {
        "proj": torch.stack([b["proj"] for b in batch]),
        "depth": torch.stack([b["depth"] for b in batch]),
        "valid": torch.stack([b["valid"] for b in batch]),
        "angle": [b["angle"] for b in batch],
        "points": [b["points"] for b in batch],
        "tube": [b["tube"] for b in batch],
        "tube_skel": torch.stack([b["tube_skel"] for b in batch]),
    }


def _tube_geometry(geom: Geometry, ds: int):
    shape = tuple(s // ds for s in geom.volume_shape)
    return shape, geom.volume_origin, geom.voxel_size * ds


def batch_losses(model: CenterNet, batch: dict, geom: Geometry,
                 cfg: TrainConfig, ray_cache: dict):
    """Mean per-sample loss components for one batch."""
    raw = model(batch["proj"])
    depth, offset = activate(raw, geom)
    shape, origin, vsize = _tube_geometry(geom, cfg.tube_downsample)

    l_point = depth.new_zeros(())
    n = depth.shape[0]
    splats = []
    for b in range(n):
        angle = batch["angle"][b]
        if angle not in ray_cache:
            ray_cache[angle] = cell_ray_frame(geom, angle, cfg.alpha_ds)
        source, dirs = ray_cache[angle]
        pts = unproject(depth[b], offset[b], source, dirs)
        l_point = l_point + chamfer(pts, batch["points"][b])
        splats.append(splat_points(pts, shape, origin, vsize))
    l_point = l_point / n
    l_tube = soft_cldice_batch(torch.stack(splats)[:, None],
                               batch["tube_skel"][:, None],
                               cfg.skeleton_iters).mean()
    l_depth = depth.new_zeros(())
    for b in range(n):
        l_depth = l_depth + depth_loss(depth[b], batch["depth"][b],
                                       batch["valid"][b], cfg.depth_cfg)
    l_depth = l_depth / n
    return l_point, l_tube, l_depth


def train(dataset_dir: str, out_dir: str, cfg: TrainConfig | None = None) -> str:
    """Fit the predictor on an engine dataset; returns the checkpoint path.

    Writes ``checkpoint.pt`` and ``curve.csv`` into ``out_dir``.
    """
    cfg = cfg or TrainConfig()
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed)

    data = PhantomViews(dataset_dir, cfg.alpha_ds, cfg.tube_downsample,
                        cfg.max_gt_points, cfg.skeleton_iters)
    geom = data.geom
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = torch.utils.data.DataLoader(
        data, batch_size=cfg.batch_size, shuffle=True, generator=gen,
        collate_fn=_collate, num_workers=0, drop_last=False)

    model = CenterNet(cfg.channels, cfg.alpha_ds)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ray_cache: dict = {}

    curve_path = os.path.join(out_dir, "curve.csv")
    step = 0
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        while step < cfg.steps:
            for batch in loader:
                step += 1
                opt.zero_grad()
                l_point, l_tube, l_depth = batch_losses(model, batch, geom,
                                                        cfg, ray_cache)
                loss = total_loss(l_point, l_tube, l_depth, step, cfg.schedule)
                loss.backward()
                opt.step()
                if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
                    row = (step, cfg.schedule.point_weight(step),
                           float(l_point.detach()), float(l_tube.detach()),
                           float(l_depth.detach()), float(loss.detach()))
                    writer.writerow([repr(v) if isinstance(v, float) else v
                                     for v in row])
                    if not all(np.isfinite(v) for v in row[1:]):
                        raise RuntimeError(f"non-finite loss at step {step}")
                if step >= cfg.steps:
                    break

    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    torch.save({
        "state_dict": model.state_dict(),
        "channels": list(cfg.channels),
        "alpha_ds": cfg.alpha_ds,
        "resolution": [geom.detector_rows, geom.detector_cols],
        "geometry": data.manifest["geometry"],
        "train_config": {**asdict(cfg),
                         "schedule": asdict(cfg.schedule),
                         "depth_cfg": asdict(cfg.depth_cfg)},
        "steps_run": step,
    }, ckpt_path)
    return ckpt_path


def load_checkpoint(path: str):
    """Checkpoint -> (model in eval mode, checkpoint dict)."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    model = CenterNet(tuple(ckpt["channels"]), int(ckpt["alpha_ds"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
