import math

import numpy as np
import pytest
import torch

from centerpred.geometry import (Geometry, cell_ray_frame, project_to_pixels,
                                 unproject)
from centerpred.model import OFFSET_MAX_VOXELS


def small_geom(det=32, vol=32):
    h = 2.0 / vol
    return Geometry(
        source_to_isocenter=3.0, source_to_detector=6.0,
        detector_rows=det, detector_cols=det,
        detector_pixel_pitch=0.036460193404931354 * (128 / det),
        volume_shape=(vol, vol, vol), voxel_size=h,
        volume_origin=(-1.0, -1.0, -1.0))


class TestDepthRange:
    def test_span_covers_volume(self):
        g = small_geom()
        lo, hi = g.depth_range()
        assert lo == pytest.approx(3.0 - math.sqrt(3.0))
        assert hi == pytest.approx(3.0 + math.sqrt(3.0))


class TestUnproject:
    def test_central_ray_hits_isocenter(self):
        # odd-sized detector so a cell center sits exactly on the axis
        g = small_geom(det=33)
        for angle in (0.0, 0.7, math.pi / 2):
            source, dirs = cell_ray_frame(g, angle, alpha_ds=1)
            d = torch.full((33, 33), g.source_to_isocenter)
            off = torch.zeros(3, 33, 33)
            pts = unproject(d, off, source, dirs).reshape(33, 33, 3)
            center = pts[16, 16]
            assert torch.allclose(center, torch.zeros(3), atol=1e-6)

    def test_offset_is_additive(self):
        g = small_geom()
        source, dirs = cell_ray_frame(g, 0.3, alpha_ds=4)
        d = torch.full((8, 8), 2.5)
        off0 = torch.zeros(3, 8, 8)
        off1 = off0.clone()
        eps = 0.017
        off1[0] += eps
        p0 = unproject(d, off0, source, dirs)
        p1 = unproject(d, off1, source, dirs)
        shift = p1 - p0
        assert torch.allclose(shift[:, 0], torch.full((64,), eps), atol=1e-7)
        assert torch.allclose(shift[:, 1:], torch.zeros(64, 2), atol=1e-7)

    def _roundtrip_cells(self, g, angle, alpha, d, off):
        source, dirs = cell_ray_frame(g, angle, alpha)
        pts = unproject(d, off, source, dirs).numpy().astype(np.float64)
        u, v = project_to_pixels(pts, g, angle)
        # cell (i, j) spans pixel coordinates [alpha*j - 0.5, alpha*j + alpha - 0.5)
        return (np.floor((v + 0.5) / alpha).reshape(d.shape),
                np.floor((u + 0.5) / alpha).reshape(d.shape))

    def test_roundtrip_small_offset_stays_in_cell(self):
        g = small_geom(det=32)
        rng = np.random.default_rng(8)
        d = torch.tensor(rng.uniform(*g.depth_range(), size=(8, 8)),
                         dtype=torch.float32)
        off = torch.tensor(rng.uniform(-g.voxel_size, g.voxel_size,
                                       size=(3, 8, 8)), dtype=torch.float32)
        ci, cj = self._roundtrip_cells(g, 1.1, 4, d, off)
        want_i, want_j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        assert np.array_equal(ci, want_i) and np.array_equal(cj, want_j)

    def test_roundtrip_max_offset_within_one_cell(self):
        # a full 4-voxel offset can reproject just past the cell edge; the
        # drift stays within the neighboring cell for depths inside the
        # field of view (near the source the magnification is unbounded)
        g = small_geom(det=32)
        rng = np.random.default_rng(9)
        sid = g.source_to_isocenter
        fov = 0.5 * min(g.volume_extent)
        d = torch.tensor(rng.uniform(sid - fov, sid + fov, size=(8, 8)),
                         dtype=torch.float32)
        delta = OFFSET_MAX_VOXELS * g.voxel_size
        off = torch.tensor(rng.uniform(-delta, delta, size=(3, 8, 8)),
                           dtype=torch.float32)
        ci, cj = self._roundtrip_cells(g, 1.1, 4, d, off)
        want_i, want_j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        assert np.all(np.abs(ci - want_i) <= 1) and np.all(np.abs(cj - want_j) <= 1)

    def test_zero_offset_roundtrip_exact_cell(self):
        g = small_geom(det=32)
        alpha = 4
        angle = 0.4
        source, dirs = cell_ray_frame(g, angle, alpha)
        d = torch.full((8, 8), 3.0)
        off = torch.zeros(3, 8, 8)
        pts = unproject(d, off, source, dirs).numpy().astype(np.float64)
        u, v = project_to_pixels(pts, g, angle)
        # cell (i, j) covers pixel coordinates [aj-0.5, aj+a-0.5)
        j = np.rint((u - (alpha - 1) / 2.0) / alpha)
        i = np.rint((v - (alpha - 1) / 2.0) / alpha)
        want_i, want_j = np.divmod(np.arange(64), 8)
        assert np.array_equal(i, want_i) and np.array_equal(j, want_j)


class TestCellRayFrame:
    def test_rays_are_unit(self):
        g = small_geom()
        _, dirs = cell_ray_frame(g, 0.9, 4)
        norms = dirs.norm(dim=2)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)

    def test_bad_downsample_rejected(self):
        with pytest.raises(ValueError):
            cell_ray_frame(small_geom(det=30), 0.0, 4)

    def test_from_dict_roundtrip(self):
        g = small_geom()
        d = {"source_to_isocenter": 3.0, "source_to_detector": 6.0,
             "detector_rows": 32, "detector_cols": 32,
             "detector_pixel_pitch": g.detector_pixel_pitch,
             "volume_shape": [32, 32, 32], "voxel_size": g.voxel_size,
             "volume_origin": [-1.0, -1.0, -1.0]}
        g2 = Geometry.from_dict(d)
        assert g2 == g
