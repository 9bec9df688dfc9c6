"""Additive 3D Gaussian mixture model of a volume.

Each component carries a center, per-axis log-scales, a unit rotation
quaternion and a raw intensity a with I = softplus(a), giving covariance
Sigma = R(q) diag(exp(s))^2 R(q)^T that is positive definite by
construction and intensity that is non-negative by construction.

compose_volume rasterizes the mixture onto a voxel grid, visiting only
the axis-aligned bounding box of each component's truncation ellipsoid.
compose_gradients is the exact hand-derived vector-Jacobian product of
that rasterization: given dL/dV it returns dL/d(center, log_scale,
quaternion, raw intensity), including the softplus chain and the
quaternion-normalization chain, so finite-difference checks against the
stored (not pre-normalized) parameters pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange, get_num_threads
from scipy.special import expit

from .geometry import ConeBeamGeometry
from .projector import VoxelGrid

QUAT_NORM_TOL = 1e-6


def softplus(a):
    return np.logaddexp(0.0, a)


def inv_softplus(y):
    """a such that softplus(a) = y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive input")
    # log(expm1(y)), stable for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class GaussianCloud:
    centers: np.ndarray          # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4) unit quaternions (w, x, y, z)
    raw_intensities: np.ndarray  # (N,), I = softplus(raw)

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.raw_intensities = np.ascontiguousarray(
            self.raw_intensities, dtype=np.float64).reshape(n)
        for arr in (self.centers, self.log_scales, self.rotations, self.raw_intensities):
            if not np.all(np.isfinite(arr)):
                raise ValueError("cloud parameters must be finite")
        if n:
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.any(norms < 0.5):
                raise ValueError("degenerate quaternion")
            if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
                raise ValueError("quaternions must be unit norm within 1e-6")

    @property
    def count(self):
        return int(self.centers.shape[0])

    @property
    def intensities(self):
        return softplus(self.raw_intensities)

    def normalized_rotations(self):
        if self.count == 0:
            return self.rotations.copy()
        return self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def renormalize(self):
        """Restore the unit-quaternion invariant in place (after an update)."""
        if self.count:
            self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self

    def covariances(self):
        """Explicit (N, 3, 3) covariance matrices."""
        rot = _rotation_matrices(self.normalized_rotations())
        var = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", rot, var, rot)

    def select(self, mask):
        mask = np.asarray(mask)
        return GaussianCloud(self.centers[mask], self.log_scales[mask],
                             self.rotations[mask], self.raw_intensities[mask])

    def copy(self):
        return GaussianCloud(self.centers.copy(), self.log_scales.copy(),
                             self.rotations.copy(), self.raw_intensities.copy())

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(z, z.copy(), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def concatenate(cls, clouds):
        return cls(np.concatenate([c.centers for c in clouds]),
                   np.concatenate([c.log_scales for c in clouds]),
                   np.concatenate([c.rotations for c in clouds]),
                   np.concatenate([c.raw_intensities for c in clouds]))


@dataclass
class ComposeConfig:
    truncation_radius_mahalanobis: float = 3.0
    min_world_radius: float | None = None   # None -> 0.25 * voxel_size

    def __post_init__(self):
        if self.truncation_radius_mahalanobis <= 0:
            raise ValueError("truncation radius must be positive")

    def scale_floor(self, voxel_size: float) -> float:
        if self.min_world_radius is None:
            return 0.25 * voxel_size
        return float(self.min_world_radius)

    def to_dict(self):
        return {"truncation_radius_mahalanobis": self.truncation_radius_mahalanobis,
                "min_world_radius": self.min_world_radius}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CloudGradients:
    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_intensities: np.ndarray


def _rotation_matrices(quats):
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def evaluate_gaussian(cloud: GaussianCloud, index: int, points) -> np.ndarray:
    """Field of one component at world points: I * exp(-1/2 (X-mu)^T Sigma^-1 (X-mu)).

    No truncation and no scale floor; this is the pure per-component law
    the composition truncates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = _rotation_matrices(cloud.normalized_rotations()[index:index + 1])[0]
    sigma = np.exp(cloud.log_scales[index])
    delta = pts - cloud.centers[index]
    white = (delta @ rot) / sigma      # rows: R^T delta, scaled per axis
    m2 = np.sum(white * white, axis=1)
    value = softplus(cloud.raw_intensities[index]) * np.exp(-0.5 * m2)
    return value if np.ndim(points) > 1 else float(value[0])


@njit(cache=True, inline="always")
def _bbox_axis(mu, half, origin, h, n):
    lo = int(np.ceil((mu - half - origin) / h - 0.5))
    hi = int(np.floor((mu + half - origin) / h - 0.5))
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit(cache=True, parallel=True)
def _compose_kernel(centers, sigmas, rots, intens, ox, oy, oz, h,
                    r_trunc, partials):
    n_parts = partials.shape[0]
    nx = partials.shape[1]
    ny = partials.shape[2]
    nz = partials.shape[3]
    n = centers.shape[0]
    r2 = r_trunc * r_trunc
    for p in prange(n_parts):
        g_lo = p * n // n_parts
        g_hi = (p + 1) * n // n_parts
        part = partials[p]
        for g in range(g_lo, g_hi):
            mx, my, mz = centers[g, 0], centers[g, 1], centers[g, 2]
            s0, s1, s2 = sigmas[g, 0], sigmas[g, 1], sigmas[g, 2]
            amp = intens[g]
            r00, r01, r02 = rots[g, 0, 0], rots[g, 0, 1], rots[g, 0, 2]
            r10, r11, r12 = rots[g, 1, 0], rots[g, 1, 1], rots[g, 1, 2]
            r20, r21, r22 = rots[g, 2, 0], rots[g, 2, 1], rots[g, 2, 2]
            # world-axis half extents of the truncation ellipsoid:
            # sqrt(Sigma_dd) * r, with Sigma_dd = sum_k R[d,k]^2 sigma_k^2
            bx = r_trunc * np.sqrt(r00 * r00 * s0 * s0 + r01 * r01 * s1 * s1 + r02 * r02 * s2 * s2)
            by = r_trunc * np.sqrt(r10 * r10 * s0 * s0 + r11 * r11 * s1 * s1 + r12 * r12 * s2 * s2)
            bz = r_trunc * np.sqrt(r20 * r20 * s0 * s0 + r21 * r21 * s1 * s1 + r22 * r22 * s2 * s2)
            ilo, ihi = _bbox_axis(mx, bx, ox, h, nx)
            jlo, jhi = _bbox_axis(my, by, oy, h, ny)
            klo, khi = _bbox_axis(mz, bz, oz, h, nz)
            for i in range(ilo, ihi + 1):
                dx = ox + (i + 0.5) * h - mx
                for j in range(jlo, jhi + 1):
                    dy = oy + (j + 0.5) * h - my
                    for k in range(klo, khi + 1):
                        dz = oz + (k + 0.5) * h - mz
                        w0 = (r00 * dx + r10 * dy + r20 * dz) / s0
                        w1 = (r01 * dx + r11 * dy + r21 * dz) / s1
                        w2 = (r02 * dx + r12 * dy + r22 * dz) / s2
                        m2 = w0 * w0 + w1 * w1 + w2 * w2
                        if m2 <= r2:
                            part[i, j, k] += amp * np.exp(-0.5 * m2)


@njit(cache=True, parallel=True)
def _gradient_kernel(centers, sigmas, rots, intens, upstream,
                     ox, oy, oz, h, r_trunc,
                     g_mu, g_sig, g_amp):
    # g_sig: (N, 3, 3) accumulates dL/dSigma; chained to scales/quats outside.
    nx = upstream.shape[0]
    ny = upstream.shape[1]
    nz = upstream.shape[2]
    n = centers.shape[0]
    r2 = r_trunc * r_trunc
    for g in prange(n):
        mx, my, mz = centers[g, 0], centers[g, 1], centers[g, 2]
        s0, s1, s2 = sigmas[g, 0], sigmas[g, 1], sigmas[g, 2]
        amp = intens[g]
        r00, r01, r02 = rots[g, 0, 0], rots[g, 0, 1], rots[g, 0, 2]
        r10, r11, r12 = rots[g, 1, 0], rots[g, 1, 1], rots[g, 1, 2]
        r20, r21, r22 = rots[g, 2, 0], rots[g, 2, 1], rots[g, 2, 2]
        bx = r_trunc * np.sqrt(r00 * r00 * s0 * s0 + r01 * r01 * s1 * s1 + r02 * r02 * s2 * s2)
        by = r_trunc * np.sqrt(r10 * r10 * s0 * s0 + r11 * r11 * s1 * s1 + r12 * r12 * s2 * s2)
        bz = r_trunc * np.sqrt(r20 * r20 * s0 * s0 + r21 * r21 * s1 * s1 + r22 * r22 * s2 * s2)
        ilo, ihi = _bbox_axis(mx, bx, ox, h, nx)
        jlo, jhi = _bbox_axis(my, by, oy, h, ny)
        klo, khi = _bbox_axis(mz, bz, oz, h, nz)
        gm0 = 0.0
        gm1 = 0.0
        gm2 = 0.0
        ga = 0.0
        gs00 = 0.0
        gs01 = 0.0
        gs02 = 0.0
        gs11 = 0.0
        gs12 = 0.0
        gs22 = 0.0
        for i in range(ilo, ihi + 1):
            dx = ox + (i + 0.5) * h - mx
            for j in range(jlo, jhi + 1):
                dy = oy + (j + 0.5) * h - my
                for k in range(klo, khi + 1):
                    up = upstream[i, j, k]
                    if up == 0.0:
                        continue
                    dz = oz + (k + 0.5) * h - mz
                    w0 = (r00 * dx + r10 * dy + r20 * dz) / s0
                    w1 = (r01 * dx + r11 * dy + r21 * dz) / s1
                    w2 = (r02 * dx + r12 * dy + r22 * dz) / s2
                    m2 = w0 * w0 + w1 * w1 + w2 * w2
                    if m2 > r2:
                        continue
                    e = np.exp(-0.5 * m2)
                    ga += up * e
                    c = up * amp * e
                    # z = Sigma^-1 (x - mu) = R diag(w / sigma)
                    t0 = w0 / s0
                    t1 = w1 / s1
                    t2 = w2 / s2
                    z0 = r00 * t0 + r01 * t1 + r02 * t2
                    z1 = r10 * t0 + r11 * t1 + r12 * t2
                    z2 = r20 * t0 + r21 * t1 + r22 * t2
                    gm0 += c * z0
                    gm1 += c * z1
                    gm2 += c * z2
                    # dL/dSigma += c * 1/2 z z^T
                    half_c = 0.5 * c
                    gs00 += half_c * z0 * z0
                    gs01 += half_c * z0 * z1
                    gs02 += half_c * z0 * z2
                    gs11 += half_c * z1 * z1
                    gs12 += half_c * z1 * z2
                    gs22 += half_c * z2 * z2
        g_mu[g, 0] = gm0
        g_mu[g, 1] = gm1
        g_mu[g, 2] = gm2
        g_amp[g] = ga
        g_sig[g, 0, 0] = gs00
        g_sig[g, 0, 1] = gs01
        g_sig[g, 0, 2] = gs02
        g_sig[g, 1, 0] = gs01
        g_sig[g, 1, 1] = gs11
        g_sig[g, 1, 2] = gs12
        g_sig[g, 2, 0] = gs02
        g_sig[g, 2, 1] = gs12
        g_sig[g, 2, 2] = gs22


def _effective_sigmas(cloud: GaussianCloud, floor: float):
    """World-space stddevs with the scale floor applied; also the active mask."""
    sigma = np.exp(cloud.log_scales)
    active = sigma >= floor
    return np.maximum(sigma, floor), active


def compose_volume(cloud: GaussianCloud, geom: ConeBeamGeometry,
                   cfg: ComposeConfig | None = None,
                   n_partitions: int | None = None) -> VoxelGrid:
    """Rasterize the truncated mixture onto the geometry's voxel grid."""
    if cfg is None:
        cfg = ComposeConfig()
    if n_partitions is None:
        n_partitions = get_num_threads()
    n_partitions = max(1, int(n_partitions))
    out = VoxelGrid.zeros(geom)
    if cloud.count == 0:
        return out
    sigmas, _ = _effective_sigmas(cloud, cfg.scale_floor(geom.voxel_size))
    rots = _rotation_matrices(cloud.normalized_rotations())
    partials = np.zeros((n_partitions,) + geom.volume_shape)
    _compose_kernel(cloud.centers, sigmas, rots, cloud.intensities,
                    geom.volume_origin[0], geom.volume_origin[1], geom.volume_origin[2],
                    geom.voxel_size, cfg.truncation_radius_mahalanobis, partials)
    data = partials[0]
    for p in range(1, n_partitions):
        data += partials[p]
    return out.like(data)


# partial derivatives of R(q) wrt unit-quaternion components (w, x, y, z)
def _rotation_jacobians(q):
    w, x, y, z = q
    dw = 2.0 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2.0 * np.array([[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]])
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]])
    return dw, dx, dy, dz


def compose_gradients(cloud: GaussianCloud, geom: ConeBeamGeometry,
                      cfg: ComposeConfig | None, upstream) -> CloudGradients:
    """Gradients of L = sum_X upstream(X) * V(X) for all four parameter groups."""
    if cfg is None:
        cfg = ComposeConfig()
    up = upstream.data if isinstance(upstream, VoxelGrid) else np.asarray(upstream, dtype=np.float64)
    if up.shape != geom.volume_shape:
        raise ValueError("upstream cotangent shape does not match the grid")
    if not np.all(np.isfinite(up)):
        raise ValueError("upstream cotangent must be finite")
    n = cloud.count
    grads = CloudGradients(np.zeros((n, 3)), np.zeros((n, 3)),
                           np.zeros((n, 4)), np.zeros(n))
    if n == 0:
        return grads
    up = np.ascontiguousarray(up)
    floor = cfg.scale_floor(geom.voxel_size)
    sigmas, active = _effective_sigmas(cloud, floor)
    quats = cloud.normalized_rotations()
    rots = _rotation_matrices(quats)
    g_sig = np.zeros((n, 3, 3))
    _gradient_kernel(cloud.centers, sigmas, rots, cloud.intensities, up,
                     geom.volume_origin[0], geom.volume_origin[1], geom.volume_origin[2],
                     geom.voxel_size, cfg.truncation_radius_mahalanobis,
                     grads.centers, g_sig, grads.raw_intensities)
    # intensity: dI/da = sigmoid(a)
    grads.raw_intensities *= expit(cloud.raw_intensities)
    # scales: dSigma/ds_k through D = diag(sigma^2); zero where the floor binds
    var = sigmas ** 2
    rtgr = np.einsum("nji,njk,nkl->nil", rots, g_sig, rots)   # R^T G R
    diag = np.stack([rtgr[:, 0, 0], rtgr[:, 1, 1], rtgr[:, 2, 2]], axis=1)
    grads.log_scales = 2.0 * var * diag * active
    # rotations: g_R = 2 G R D, then contract with dR/dq_hat and project
    # through the normalization q_hat = q / |q|
    g_rot = 2.0 * np.einsum("nij,njk,nk->nik", g_sig, rots, var)
    raw_q = cloud.rotations
    norms = np.linalg.norm(raw_q, axis=1)
    for g in range(n):
        jac = _rotation_jacobians(quats[g])
        g_hat = np.array([np.sum(g_rot[g] * jac[c]) for c in range(4)])
        grads.rotations[g] = (g_hat - (g_hat @ quats[g]) * quats[g]) / norms[g]
    return grads


def brute_force_volume(cloud: GaussianCloud, geom: ConeBeamGeometry) -> VoxelGrid:
    """Untruncated dense sum over every (component, voxel) pair.

    Reference oracle for compose_volume's truncation error bound; no
    scale floor, no truncation, quadratic cost.
    """
    shape = geom.volume_shape
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1).T
    pts = np.asarray(geom.volume_origin) + (idx + 0.5) * geom.voxel_size
    acc = np.zeros(pts.shape[0])
    for g in range(cloud.count):
        acc += evaluate_gaussian(cloud, g, pts)
    return VoxelGrid(acc.reshape(shape), geom.voxel_size, geom.volume_origin)
