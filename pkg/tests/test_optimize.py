import numpy as np
import pytest

from gausstomo import optimize
from gausstomo.gaussians import (ComposeConfig, GaussianCloud, compose_gradients,
                                 compose_volume, inv_softplus, softplus)
from gausstomo.geometry import ConeBeamGeometry
from gausstomo.metrics import PointCloud
from gausstomo.optimize import (DensityControlConfig, OptimizerConfig,
                                ReconLossConfig, ReconstructionError,
                                density_control_step, extract_centerline_mask,
                                init_from_pointcloud, recon_loss, reconstruct)
from gausstomo.projector import ProjectionSet, forward_project


def small_geom(n=16, det=16):
    return ConeBeamGeometry(detector_rows=det, detector_cols=det,
                            volume_shape=(n, n, n))


def single_gaussian_cloud(center, sigma, intensity, quat=(1.0, 0.0, 0.0, 0.0)):
    return GaussianCloud(np.array([center], dtype=np.float64),
                         np.full((1, 3), np.log(sigma)),
                         np.array([quat], dtype=np.float64),
                         np.array([float(inv_softplus(intensity))]))


def random_cloud(rng, n, geom, sigma_range=(1.2, 2.5)):
    h = geom.voxel_size
    extent = 0.5 * min(geom.volume_extent)
    centers = rng.uniform(-0.5 * extent, 0.5 * extent, size=(n, 3))
    log_scales = np.log(h * rng.uniform(*sigma_range, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    raw = rng.uniform(-1.0, 1.0, size=n)
    return GaussianCloud(centers, log_scales, quats, raw)


# ---------------------------------------------------------------- masks

class TestCenterlineMask:
    def test_zero_image_gives_zero_mask(self):
        m = extract_centerline_mask(np.zeros((12, 12)))
        assert m.shape == (12, 12)
        assert m.sum() == 0

    def test_wide_bar_thins_to_single_pixel_line(self):
        img = np.zeros((20, 30))
        img[8:13, 4:26] = 1.0      # 5 px wide, 22 px long
        m = extract_centerline_mask(img)
        assert m.max() == 1
        # one pixel per column over the bar interior
        cols = m[:, 6:24]
        assert np.all(cols.sum(axis=0) == 1)

    def test_threshold_is_relative_to_peak(self):
        img = np.zeros((16, 16))
        img[5, 5] = 100.0
        img[10, 10] = 5.0          # under 0.1 * max, ignored
        m = extract_centerline_mask(img)
        assert m[5, 5] == 1
        assert m[10, 10] == 0

    def test_idempotent_on_own_output(self):
        img = np.zeros((24, 24))
        img[4:9, 3:20] = 2.0
        m1 = extract_centerline_mask(img)
        m2 = extract_centerline_mask(m1.astype(np.float64))
        assert np.array_equal(m1, m2)

    def test_rejects_nonfinite(self):
        img = np.zeros((8, 8))
        img[2, 2] = np.nan
        with pytest.raises(ValueError):
            extract_centerline_mask(img)


# ---------------------------------------------------------------- loss

def proj_set(geom, images, angles=None):
    images = np.asarray(images, dtype=np.float64)
    if angles is None:
        angles = np.zeros(images.shape[0])
    return ProjectionSet(geom, np.asarray(angles, dtype=np.float64), images)


class TestReconLoss:
    def geom2x2(self):
        return ConeBeamGeometry(detector_rows=2, detector_cols=2,
                                volume_shape=(4, 4, 4))

    def test_hand_example(self):
        g = self.geom2x2()
        pred = proj_set(g, [[[1.0, 0.0], [0.0, 0.0]]])
        meas = proj_set(g, [[[0.0, 0.0], [0.0, 0.0]]])
        cfg = ReconLossConfig(alpha=0.5,
                              masks=np.array([[[1.0, 0.0], [0.0, 0.0]]]))
        out = recon_loss(pred, meas, cfg)
        assert out.total == pytest.approx(1.0)
        assert out.l2 == pytest.approx(1.0)
        assert out.cl == pytest.approx(1.0)

    def test_alpha_one_is_plain_l2(self):
        g = self.geom2x2()
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 2, 2))
        b = rng.normal(size=(2, 2, 2))
        cfg = ReconLossConfig(alpha=1.0, masks=np.ones((2, 2, 2)))
        out = recon_loss(proj_set(g, a), proj_set(g, b), cfg)
        assert out.total == pytest.approx(np.sum((a - b) ** 2))

    def test_zero_at_equality(self):
        g = self.geom2x2()
        a = np.ones((1, 2, 2))
        cfg = ReconLossConfig(alpha=0.5, masks=np.ones((1, 2, 2)))
        out = recon_loss(proj_set(g, a), proj_set(g, a.copy()), cfg)
        assert out.total == 0.0
        assert np.all(out.cotangent == 0.0)

    def test_cotangent_matches_finite_differences(self):
        g = self.geom2x2()
        rng = np.random.default_rng(11)
        pred = rng.normal(size=(2, 2, 2))
        meas = rng.normal(size=(2, 2, 2))
        masks = (rng.uniform(size=(2, 2, 2)) > 0.5).astype(np.float64)
        cfg = ReconLossConfig(alpha=0.3, masks=masks)
        out = recon_loss(proj_set(g, pred), proj_set(g, meas), cfg)
        h = 1e-6
        for idx in np.ndindex(pred.shape):
            plus = pred.copy(); plus[idx] += h
            minus = pred.copy(); minus[idx] -= h
            fd = (recon_loss(proj_set(g, plus), proj_set(g, meas), cfg).total
                  - recon_loss(proj_set(g, minus), proj_set(g, meas), cfg).total) / (2 * h)
            assert fd == pytest.approx(out.cotangent[idx], rel=1e-5, abs=1e-7)

    def test_mask_required_and_shape_checked(self):
        g = self.geom2x2()
        a = np.ones((1, 2, 2))
        with pytest.raises(ValueError):
            recon_loss(proj_set(g, a), proj_set(g, a), ReconLossConfig(alpha=0.5))
        with pytest.raises(ValueError):
            recon_loss(proj_set(g, a), proj_set(g, a),
                       ReconLossConfig(alpha=0.5, masks=np.ones((2, 2, 2))))

    def test_alpha_bounds_and_binary_mask_enforced(self):
        with pytest.raises(ValueError):
            ReconLossConfig(alpha=-0.1)
        with pytest.raises(ValueError):
            ReconLossConfig(alpha=1.5)
        with pytest.raises(ValueError):
            ReconLossConfig(alpha=0.5, masks=np.full((1, 2, 2), 0.5))


# ---------------------------------------------------------------- configs

class TestConfigs:
    def test_optimizer_defaults(self):
        cfg = OptimizerConfig()
        assert cfg.iterations == 10000
        assert cfg.lr_center_rel == pytest.approx(2e-3)
        assert cfg.lr_scale == pytest.approx(5e-3)
        assert cfg.lr_rotation == pytest.approx(1e-3)
        assert cfg.lr_intensity == pytest.approx(1e-2)
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
        assert cfg.eps == pytest.approx(1e-8)

    def test_optimizer_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(iterations=-1)
        with pytest.raises(ValueError):
            OptimizerConfig(lr_scale=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(beta1=1.0)

    def test_density_defaults_and_validation(self):
        cfg = DensityControlConfig()
        assert cfg.interval == 100
        assert cfg.prune_intensity_frac == pytest.approx(1e-3)
        assert cfg.split_grad_threshold == pytest.approx(2e-4)
        assert cfg.split_scale_factor == pytest.approx(1.6)
        with pytest.raises(ValueError):
            DensityControlConfig(interval=0)
        with pytest.raises(ValueError):
            DensityControlConfig(max_gaussians=0)

    def test_round_trips(self):
        o = OptimizerConfig(iterations=7, lr_intensity=0.5)
        assert OptimizerConfig.from_dict(o.to_dict()) == o
        d = DensityControlConfig(interval=3, max_gaussians=9)
        assert DensityControlConfig.from_dict(d.to_dict()) == d


# ---------------------------------------------------------------- init

class TestInitFromPointcloud:
    def test_single_point(self):
        geom = small_geom()
        cloud = init_from_pointcloud(PointCloud(np.array([[0.1, -0.2, 0.05]])),
                                     geom, measured_max=2.0)
        assert cloud.count == 1
        assert cloud.centers[0] == pytest.approx([0.1, -0.2, 0.05])
        assert np.exp(cloud.log_scales[0]) == pytest.approx(1.5 * geom.voxel_size)
        assert cloud.rotations[0] == pytest.approx([1.0, 0.0, 0.0, 0.0])
        assert cloud.intensities[0] == pytest.approx(0.2)

    def test_duplicates_kept(self):
        geom = small_geom()
        pts = np.zeros((3, 3))
        cloud = init_from_pointcloud(PointCloud(pts), geom, measured_max=1.0)
        assert cloud.count == 3

    def test_out_of_bounds_clipped(self, caplog):
        geom = small_geom()
        pts = np.array([[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with caplog.at_level("INFO", logger="gausstomo.optimize"):
            cloud = init_from_pointcloud(PointCloud(pts), geom, measured_max=1.0)
        lo = np.asarray(geom.volume_origin)
        hi = lo + np.asarray(geom.volume_shape) * geom.voxel_size
        assert np.all(cloud.centers >= lo) and np.all(cloud.centers <= hi)
        assert cloud.centers[0, 0] == pytest.approx(hi[0])
        assert any("1/2" in r.message for r in caplog.records)

    def test_large_sweep_kept_verbatim_inside(self):
        geom = small_geom()
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.9, 0.9, size=(1024, 3))
        cloud = init_from_pointcloud(PointCloud(pts), geom, measured_max=3.0)
        assert cloud.count == 1024
        assert np.array_equal(cloud.centers, pts)
        assert np.all(cloud.intensities == pytest.approx(0.3))

    def test_empty_and_bad_signal_error(self):
        geom = small_geom()
        with pytest.raises(ValueError):
            init_from_pointcloud(PointCloud(np.zeros((0, 3))), geom, 1.0)
        with pytest.raises(ValueError):
            init_from_pointcloud(PointCloud(np.zeros((1, 3))), geom, 0.0)


# ---------------------------------------------------------------- density control

class TestDensityControl:
    def quiet_cloud(self, n=4):
        rng = np.random.default_rng(5)
        geom = small_geom()
        return random_cloud(rng, n, geom)

    def test_unchanged_when_nothing_triggers(self):
        cloud = self.quiet_cloud()
        cfg = DensityControlConfig()
        out = density_control_step(cloud, np.zeros(cloud.count), cfg)
        assert out.count == cloud.count
        assert np.array_equal(out.centers, cloud.centers)
        assert np.array_equal(out.raw_intensities, cloud.raw_intensities)

    def test_prunes_dim_gaussian(self):
        cloud = self.quiet_cloud()
        bright = float(cloud.intensities.max())
        dim_raw = float(inv_softplus(1e-5 * bright))
        cloud.raw_intensities[1] = dim_raw
        out = density_control_step(cloud, np.zeros(cloud.count),
                                   DensityControlConfig())
        assert out.count == cloud.count - 1
        assert np.all(out.intensities > 1e-3 * bright * 0.99)

    def test_split_preserves_intensity_and_offsets_children(self):
        sigma = np.array([0.05, 0.02, 0.03])
        cloud = GaussianCloud(np.array([[0.1, 0.0, -0.1]]),
                              np.log(sigma)[None, :],
                              np.array([[1.0, 0.0, 0.0, 0.0]]),
                              np.array([float(inv_softplus(0.8))]))
        cfg = DensityControlConfig(split_grad_threshold=1e-4,
                                   split_scale_factor=1.6)
        out = density_control_step(cloud, np.array([5e-4]), cfg)
        assert out.count == 2
        assert np.sum(out.intensities) == pytest.approx(0.8, rel=1e-12)
        # identity rotation, largest axis is x: children sit at +/- sigma_x
        got = np.sort(out.centers[:, 0])
        assert got == pytest.approx([0.1 - 0.05, 0.1 + 0.05])
        assert np.all(out.centers[:, 1] == pytest.approx(0.0))
        assert np.exp(out.log_scales) == pytest.approx(
            np.broadcast_to(sigma / 1.6, (2, 3)))

    def test_cap_limits_growth(self):
        cloud = self.quiet_cloud(6)
        cfg = DensityControlConfig(split_grad_threshold=1e-9, max_gaussians=8)
        out = density_control_step(cloud, np.full(6, 1.0), cfg)
        assert out.count <= 8

    def test_keeps_at_least_one(self):
        cloud = self.quiet_cloud(3)
        cloud.raw_intensities[:] = inv_softplus(np.array([1e-9, 2e-9, 5.0]))
        cfg = DensityControlConfig(prune_intensity_frac=0.9)
        out = density_control_step(cloud, np.zeros(3), cfg)
        assert out.count >= 1
        assert out.intensities.max() == pytest.approx(5.0)
        one = density_control_step(single_gaussian_cloud((0, 0, 0), 0.05, 1e-12),
                                   np.zeros(1), DensityControlConfig())
        assert one.count == 1

    def test_accumulator_shape_checked(self):
        cloud = self.quiet_cloud(3)
        with pytest.raises(ValueError):
            density_control_step(cloud, np.zeros(2), DensityControlConfig())


# ---------------------------------------------------------------- end-to-end gradient

class TestPipelineGradient:
    def test_finite_difference_agreement(self):
        geom = small_geom(16, 16)
        rng = np.random.default_rng(42)
        cloud = random_cloud(rng, 10, geom, sigma_range=(1.5, 3.0))
        target = random_cloud(rng, 10, geom, sigma_range=(1.5, 3.0))
        angles = np.array([0.0, np.pi / 2])
        ccfg = ComposeConfig(truncation_radius_mahalanobis=8.0)
        meas = forward_project(compose_volume(target, geom, ccfg), geom, angles)
        masks = (meas.images > 0.1 * meas.images.max()).astype(np.float64)
        lcfg = ReconLossConfig(alpha=0.5, masks=masks)

        def loss_of(c):
            pred = forward_project(compose_volume(c, geom, ccfg), geom, angles)
            return recon_loss(pred, meas, lcfg).total

        from gausstomo.projector import backproject
        pred = forward_project(compose_volume(cloud, geom, ccfg), geom, angles)
        out = recon_loss(pred, meas, lcfg)
        upstream = backproject(ProjectionSet(geom, angles, out.cotangent))
        grads = compose_gradients(cloud, geom, ccfg, upstream)

        h = 2e-6
        checked = 0
        for gi in (0, 4, 9):
            for attr, garr in (("centers", grads.centers),
                               ("log_scales", grads.log_scales),
                               ("rotations", grads.rotations)):
                arr = getattr(cloud, attr)
                for j in range(arr.shape[1]):
                    c1 = cloud.copy(); c1_arr = getattr(c1, attr)
                    c2 = cloud.copy(); c2_arr = getattr(c2, attr)
                    c1_arr[gi, j] += h
                    c2_arr[gi, j] -= h
                    fd = (loss_of(c1) - loss_of(c2)) / (2 * h)
                    an = garr[gi, j]
                    denom = max(abs(fd), abs(an), 1e-4)
                    assert abs(fd - an) / denom < 1e-3, (attr, gi, j, fd, an)
                    checked += 1
            c1 = cloud.copy(); c1.raw_intensities[gi] += h
            c2 = cloud.copy(); c2.raw_intensities[gi] -= h
            fd = (loss_of(c1) - loss_of(c2)) / (2 * h)
            an = grads.raw_intensities[gi]
            denom = max(abs(fd), abs(an), 1e-4)
            assert abs(fd - an) / denom < 1e-3, ("intensity", gi, fd, an)
            checked += 1
        assert checked == 33


# ---------------------------------------------------------------- reconstruct

def make_measurement(geom, cloud, angles, ccfg=None):
    vol = compose_volume(cloud, geom, ccfg)
    return forward_project(vol, geom, np.asarray(angles, dtype=np.float64))


class TestReconstruct:
    def test_exact_init_zero_iterations_starts_at_zero(self):
        geom = small_geom()
        target = single_gaussian_cloud((0.05, -0.1, 0.0), 0.15, 1.2)
        meas = make_measurement(geom, target, [0.0, np.pi / 2])
        res = reconstruct(meas, target.copy(),
                          opt_cfg=OptimizerConfig(iterations=0),
                          density_cfg=DensityControlConfig(enabled=False))
        assert res.trace.shape == (1, 5)
        assert res.trace[0, 0] == 0
        assert res.trace[0, 3] == pytest.approx(0.0, abs=1e-18)
        assert res.trace[0, 4] == 1

    def test_single_gaussian_perturbed_init_converges(self):
        geom = small_geom(32, 32)
        h = geom.voxel_size
        target = single_gaussian_cloud((0.0, 0.05, -0.05), 0.12, 1.5)
        meas = make_measurement(geom, target, [0.0, np.pi / 2])
        init = single_gaussian_cloud((2 * h, 0.05 - h, -0.05 + h), 0.09, 0.4)
        res = reconstruct(meas, init,
                          opt_cfg=OptimizerConfig(iterations=500,
                                                  lr_intensity=5e-2),
                          density_cfg=DensityControlConfig(enabled=False))
        assert res.trace[-1, 3] < 0.01 * res.trace[0, 3]
        assert np.all(np.isfinite(res.trace))

    def test_pointcloud_init_runs_and_traces(self):
        geom = small_geom()
        target = single_gaussian_cloud((0.0, 0.0, 0.0), 0.2, 1.0)
        meas = make_measurement(geom, target, [0.0, np.pi / 2])
        pts = PointCloud(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, -0.1]]))
        res = reconstruct(meas, pts,
                          opt_cfg=OptimizerConfig(iterations=12),
                          density_cfg=DensityControlConfig(enabled=False))
        assert res.trace.shape == (13, 5)
        assert np.all(np.isfinite(res.trace))
        assert np.all(res.trace[:, 4] == 2)
        assert res.volume.data.shape == geom.volume_shape
        # masks derive from the measured views
        expected = np.stack([extract_centerline_mask(im) for im in meas.images])
        assert np.array_equal(res.masks, expected.astype(np.float64))

    def test_deterministic_trace_with_density_control(self):
        geom = small_geom()
        rng = np.random.default_rng(9)
        target = random_cloud(rng, 3, geom, sigma_range=(2.0, 3.5))
        target.raw_intensities[:] = inv_softplus(np.array([0.8, 0.6, 0.7]))
        meas = make_measurement(geom, target, [0.0, np.pi / 2])
        pts = PointCloud(target.centers + 2 * geom.voxel_size)
        kwargs = dict(opt_cfg=OptimizerConfig(iterations=25),
                      density_cfg=DensityControlConfig(interval=10,
                                                       split_grad_threshold=1e-8))
        r1 = reconstruct(meas, pts, **kwargs)
        r2 = reconstruct(meas, pts, **kwargs)
        assert np.array_equal(r1.trace, r2.trace)
        assert np.array_equal(r1.volume.data, r2.volume.data)
        assert np.array_equal(r1.cloud.centers, r2.cloud.centers)
        # density control actually fired (clouds grew past the seed count)
        assert r1.trace[-1, 4] > 2

    def test_divergence_guard(self, monkeypatch):
        geom = small_geom()
        target = single_gaussian_cloud((0.0, 0.0, 0.0), 0.2, 1.0)
        meas = make_measurement(geom, target, [0.0])

        def bad_loss(pred, m, cfg):
            return optimize.LossBreakdown(total=float("nan"), l2=0.0, cl=0.0,
                                          cotangent=np.zeros_like(m.images))

        monkeypatch.setattr(optimize, "recon_loss", bad_loss)
        with pytest.raises(ReconstructionError):
            reconstruct(meas, target.copy(),
                        opt_cfg=OptimizerConfig(iterations=3),
                        density_cfg=DensityControlConfig(enabled=False))

    def test_trace_csv_round_trip(self, tmp_path):
        geom = small_geom()
        target = single_gaussian_cloud((0.0, 0.0, 0.0), 0.2, 1.0)
        meas = make_measurement(geom, target, [0.0, np.pi / 2])
        res = reconstruct(meas, target.copy(),
                          opt_cfg=OptimizerConfig(iterations=2),
                          density_cfg=DensityControlConfig(enabled=False))
        path = tmp_path / "trace.csv"
        optimize.write_loss_trace(str(path), res.trace)
        back = optimize.read_loss_trace(str(path))
        assert np.array_equal(back, res.trace)
