"""Cone-beam frame math mirrored from the engine's documented conventions.

The dataset manifest carries the full acquisition geometry as plain
numbers; this module turns detector cells plus a predicted depth and
offset into world positions.  Conventions (engine contract): source at
``SID * (cos b, sin b, 0)``, flat detector centered through the
isocenter at distance SDD, columns along ``(-sin b, cos b, 0)``, rows
along ``+z``, pixel centers offset by ``(index - (n-1)/2) * pitch``,
voxel centers at ``origin + (index + 0.5) * voxel_size``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Geometry:
    source_to_isocenter: float
    source_to_detector: float
    detector_rows: int
    detector_cols: int
    detector_pixel_pitch: float
    volume_shape: tuple
    voxel_size: float
    volume_origin: tuple

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(
            source_to_isocenter=float(d["source_to_isocenter"]),
            source_to_detector=float(d["source_to_detector"]),
            detector_rows=int(d["detector_rows"]),
            detector_cols=int(d["detector_cols"]),
            detector_pixel_pitch=float(d["detector_pixel_pitch"]),
            volume_shape=tuple(int(n) for n in d["volume_shape"]),
            voxel_size=float(d["voxel_size"]),
            volume_origin=tuple(float(v) for v in d["volume_origin"]),
        )

    @property
    def volume_extent(self):
        return tuple(n * self.voxel_size for n in self.volume_shape)

    @property
    def volume_max(self):
        return tuple(o + e for o, e in zip(self.volume_origin, self.volume_extent))

    def depth_range(self):
        """Span of source distances that can intersect the volume box."""
        half_diag = 0.5 * math.sqrt(sum(e * e for e in self.volume_extent))
        return (self.source_to_isocenter - half_diag,
                self.source_to_isocenter + half_diag)


def view_frame(geom: Geometry, angle: float):
    c, s = math.cos(angle), math.sin(angle)
    source = np.array([geom.source_to_isocenter * c,
                       geom.source_to_isocenter * s, 0.0])
    det_center = source + geom.source_to_detector * np.array([-c, -s, 0.0])
    e_u = np.array([-s, c, 0.0])
    e_v = np.array([0.0, 0.0, 1.0])
    return source, det_center, e_u, e_v


def cell_ray_frame(geom: Geometry, angle: float, alpha_ds: int):
    """Source position and unit ray directions through every cell center.

    Cell (i, j) of the downsampled grid covers an alpha_ds x alpha_ds
    pixel block; its ray passes through the block's center.  Returns
    torch tensors ``(source (3,), dirs (Hc, Wc, 3))``.
    """
    if geom.detector_rows % alpha_ds or geom.detector_cols % alpha_ds:
        raise ValueError("detector size not divisible by the downsampling factor")
    rows_c = geom.detector_rows // alpha_ds
    cols_c = geom.detector_cols // alpha_ds
    source, det_center, e_u, e_v = view_frame(geom, angle)
    # block center in pixel coordinates, then signed in-plane offsets
    v_px = np.arange(rows_c) * alpha_ds + (alpha_ds - 1) / 2.0
    u_px = np.arange(cols_c) * alpha_ds + (alpha_ds - 1) / 2.0
    vc = (v_px - (geom.detector_rows - 1) / 2.0) * geom.detector_pixel_pitch
    uc = (u_px - (geom.detector_cols - 1) / 2.0) * geom.detector_pixel_pitch
    points = (det_center[None, None, :]
              + uc[None, :, None] * e_u[None, None, :]
              + vc[:, None, None] * e_v[None, None, :])
    dirs = points - source[None, None, :]
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    return (torch.from_numpy(source.astype(np.float32)),
            torch.from_numpy(dirs.astype(np.float32)))


def unproject(depth: torch.Tensor, offset: torch.Tensor,
              source: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """World positions of per-cell predictions.

    depth (..., Hc, Wc), offset (..., 3, Hc, Wc) -> points (..., Hc*Wc, 3)
    computed as source + depth * ray_direction + offset.
    """
    pts = source.view(*([1] * (depth.dim() - 2)), 1, 1, 3) \
        + depth.unsqueeze(-1) * dirs \
        + offset.movedim(-3, -1)
    return pts.flatten(-3, -2)


def project_to_pixels(points: np.ndarray, geom: Geometry, angle: float):
    """World points -> continuous detector pixel coordinates (u, v)."""
    source, det_center, e_u, e_v = view_frame(geom, angle)
    axis = (det_center - source) / geom.source_to_detector
    rel = points - source[None, :]
    t = geom.source_to_detector / (rel @ axis)
    hit = source[None, :] + t[:, None] * rel - det_center[None, :]
    u = hit @ e_u / geom.detector_pixel_pitch + (geom.detector_cols - 1) / 2.0
    v = hit @ e_v / geom.detector_pixel_pitch + (geom.detector_rows - 1) / 2.0
    return u, v
