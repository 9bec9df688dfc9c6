"""Inference: one projection -> an engine-ready seed-point file."""

from __future__ import annotations

import os

import numpy as np
import torch

from . import dataio
from .geometry import Geometry, cell_ray_frame, unproject
from .model import CenterNet, activate


def predict_points(model: CenterNet, projection: np.ndarray, geom: Geometry,
                   angle: float) -> np.ndarray:
    """Predicted world positions, one per detector cell, clipped to the box.

    The projection must match the detector resolution the model was
    trained at; the output always has (H/a) * (W/a) rows.
    """
    if projection.shape != (geom.detector_rows, geom.detector_cols):
        raise ValueError(
            f"projection shape {projection.shape} does not match the "
            f"detector {(geom.detector_rows, geom.detector_cols)}")
    x = torch.from_numpy(np.ascontiguousarray(projection, dtype=np.float32))
    with torch.no_grad():
        raw = model(x[None, None])
        depth, offset = activate(raw, geom)
        source, dirs = cell_ray_frame(geom, float(angle), model.alpha_ds)
        pts = unproject(depth[0], offset[0], source, dirs).numpy()
    lo = np.asarray(geom.volume_origin)
    hi = np.asarray(geom.volume_max)
    return np.clip(pts.astype(np.float64), lo, hi)


def predict_dataset(model: CenterNet, ckpt: dict, dataset_dir: str,
                    out_dir: str, view_index: int = 0) -> list:
    """Emit one <case_id>.pc file per manifest case; returns the paths.

    Uses the first scheduled view by default (a single projection is the
    whole inference input).
    """
    manifest = dataio.load_manifest(dataset_dir)
    geom = Geometry.from_dict(manifest["geometry"])
    trained = tuple(ckpt.get("resolution", (geom.detector_rows, geom.detector_cols)))
    if (geom.detector_rows, geom.detector_cols) != trained:
        raise ValueError(
            f"dataset resolution {(geom.detector_rows, geom.detector_cols)} "
            f"does not match the checkpoint's training resolution {trained}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for entry in manifest["samples"]:
        paths = dataio.sample_paths(dataset_dir, entry)
        if not 0 <= view_index < len(paths["projections"]):
            raise ValueError(f"view index {view_index} out of range")
        proj, _ = dataio.read_array(paths["projections"][view_index])
        angle = float(entry["angles"][view_index])
        pts = predict_points(model, proj, geom, angle)
        path = os.path.join(out_dir, f"{entry['id']}.pc")
        dataio.write_pointcloud(path, pts)
        written.append(path)
    return written
