"""Cone-beam acquisition geometry and sparse-view angle schedules.

Conventions used throughout the engine:

* World frame: the reconstruction volume occupies an axis-aligned box,
  by default the cube [-1, 1]^3, with the rotation isocenter at the
  world origin.
* The source rotates about the world z-axis.  At rotation angle ``beta``
  the source sits at ``SID * (cos beta, sin beta, 0)`` and the flat
  detector is centered on the line through source and isocenter at
  distance ``SDD`` from the source.
* Detector axes: ``e_u = (-sin beta, cos beta, 0)`` (columns) and
  ``e_v = (0, 0, 1)`` (rows).  Pixel centers are offset from the
  detector center by ``(index - (n - 1)/2) * pixel_pitch``.
* Volumes are C-ordered arrays indexed ``[ix, iy, iz]``; voxel centers
  sit at ``origin + (index + 0.5) * voxel_size``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_VIEW_INTERVALS = {2: math.pi / 2, 4: math.pi / 4, 8: math.pi / 8, 16: math.pi / 16}


def _default_pixel_pitch(source_to_iso, source_to_det, fov_radius, n_pixels, margin=0.10):
    """Pitch such that the detector half-width covers a centered sphere of
    ``fov_radius`` at every rotation angle, plus a safety margin.

    The field of view is the sphere inscribed in the volume box, not its
    corner-touching bounding sphere: scanned content is expected inside
    the inscribed sphere, and sizing pixels for the corners would waste
    detector resolution on regions reconstruction never uses."""
    if fov_radius >= source_to_iso:
        raise ValueError("source inside the field of view")
    half_angle = math.asin(fov_radius / source_to_iso)
    half_width = source_to_det * math.tan(half_angle) * (1.0 + margin)
    return 2.0 * half_width / n_pixels


@dataclass
class ConeBeamGeometry:
    """Circular cone-beam scan geometry (point source, flat detector)."""

    source_to_isocenter: float = 3.0
    source_to_detector: float = 6.0
    detector_rows: int = 128
    detector_cols: int = 128
    detector_pixel_pitch: float | None = None
    volume_shape: tuple[int, int, int] = (128, 128, 128)
    voxel_size: float | None = None
    volume_origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.volume_shape = tuple(int(n) for n in self.volume_shape)
        if self.voxel_size is None:
            self.voxel_size = 2.0 / max(self.volume_shape)
        if self.volume_origin is None:
            self.volume_origin = tuple(-0.5 * n * self.voxel_size for n in self.volume_shape)
        else:
            self.volume_origin = tuple(float(v) for v in self.volume_origin)
        if self.detector_pixel_pitch is None:
            self.detector_pixel_pitch = _default_pixel_pitch(
                self.source_to_isocenter, self.source_to_detector,
                self.fov_radius, min(self.detector_rows, self.detector_cols))
        self.validate()

    def validate(self):
        if not self.source_to_detector > self.source_to_isocenter:
            raise ValueError("detector must be farther from the source than the isocenter")
        if self.source_to_isocenter <= self.volume_diagonal / 2.0:
            raise ValueError("source must lie outside the volume")
        if min(self.detector_rows, self.detector_cols) < 1:
            raise ValueError("detector must have at least one pixel")
        half_width = 0.5 * min(self.detector_rows, self.detector_cols) * self.detector_pixel_pitch
        needed = self.source_to_detector * math.tan(
            math.asin(min(1.0, self.fov_radius / self.source_to_isocenter)))
        if half_width < needed * 0.999:
            raise ValueError("detector field of view does not cover the inscribed sphere")

    @property
    def volume_extent(self):
        return tuple(n * self.voxel_size for n in self.volume_shape)

    @property
    def fov_radius(self):
        """Radius of the inscribed sphere the detector must cover."""
        return 0.5 * min(self.volume_extent)

    @property
    def volume_diagonal(self):
        return math.sqrt(sum(e * e for e in self.volume_extent))

    @property
    def volume_max(self):
        return tuple(o + e for o, e in zip(self.volume_origin, self.volume_extent))

    def view_frame(self, angle):
        """Source position and detector frame for one rotation angle.

        Returns ``(source, det_center, e_u, e_v)`` as float64 arrays.
        """
        c, s = math.cos(angle), math.sin(angle)
        source = np.array([self.source_to_isocenter * c, self.source_to_isocenter * s, 0.0])
        axis = np.array([-c, -s, 0.0])  # source -> isocenter
        det_center = source + self.source_to_detector * axis
        e_u = np.array([-s, c, 0.0])
        e_v = np.array([0.0, 0.0, 1.0])
        return source, det_center, e_u, e_v

    def pixel_coords(self, u_index, v_index):
        """Signed in-plane detector coordinates of a pixel center."""
        u = (np.asarray(u_index, dtype=np.float64) - (self.detector_cols - 1) / 2.0) * self.detector_pixel_pitch
        v = (np.asarray(v_index, dtype=np.float64) - (self.detector_rows - 1) / 2.0) * self.detector_pixel_pitch
        return u, v

    def to_dict(self):
        return {
            "source_to_isocenter": self.source_to_isocenter,
            "source_to_detector": self.source_to_detector,
            "detector_rows": self.detector_rows,
            "detector_cols": self.detector_cols,
            "detector_pixel_pitch": self.detector_pixel_pitch,
            "volume_shape": list(self.volume_shape),
            "voxel_size": self.voxel_size,
            "volume_origin": list(self.volume_origin),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "volume_shape" in d:
            d["volume_shape"] = tuple(d["volume_shape"])
        if "volume_origin" in d and d["volume_origin"] is not None:
            d["volume_origin"] = tuple(d["volume_origin"])
        return cls(**d)


@dataclass
class ViewSchedule:
    """Evenly spaced rotation angles for a sparse acquisition."""

    n_views: int
    angle_interval: float
    start_angle: float = 0.0
    axis: str = "z"

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.axis != "z":
            raise ValueError("only z-axis rotation is supported")
        angles = self.angles
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if angles[0] < 0 or angles[-1] >= 2 * math.pi:
            raise ValueError("angles must lie in [0, 2*pi)")

    @property
    def angles(self) -> np.ndarray:
        return self.start_angle + self.angle_interval * np.arange(self.n_views, dtype=np.float64)

    def heldout_angles(self) -> np.ndarray:
        """Midpoints between consecutive scheduled angles (default
        evaluation views)."""
        return (self.angles + self.angle_interval / 2.0) % (2 * math.pi)

    def to_dict(self):
        return {"n_views": self.n_views, "angle_interval": self.angle_interval,
                "start_angle": self.start_angle, "axis": self.axis}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_schedule(n_views: int, angle_interval: float | None = None,
                  start_angle: float = 0.0) -> ViewSchedule:
    """Build the sparse-view schedule; counts 2/4/8/16 get the default
    pi/2, pi/4, pi/8, pi/16 spacing, other counts need an explicit interval."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if angle_interval is None:
        if n_views not in DEFAULT_VIEW_INTERVALS:
            raise ValueError(
                f"no default interval for n_views={n_views}; pass angle_interval explicitly")
        angle_interval = DEFAULT_VIEW_INTERVALS[n_views]
    return ViewSchedule(n_views=n_views, angle_interval=angle_interval, start_angle=start_angle)


def ray_for_pixel(geom: ConeBeamGeometry, angle: float, u: int, v: int):
    """Ray through the center of detector pixel (column u, row v).

    Returns ``(origin, direction)``: the rotated source position and a
    unit vector from the source through the pixel center.
    """
    if not (0 <= u < geom.detector_cols and 0 <= v < geom.detector_rows):
        raise ValueError(f"pixel index ({u}, {v}) outside detector")
    source, det_center, e_u, e_v = geom.view_frame(angle)
    uc, vc = geom.pixel_coords(u, v)
    point = det_center + uc * e_u + vc * e_v
    direction = point - source
    direction = direction / np.linalg.norm(direction)
    return source, direction
