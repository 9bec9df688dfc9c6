"""Procedural vascular-tree phantoms and the simulated scan dataset factory.

Trees grow recursively: each branch is a short chain of jittered capsule
segments, then splits in two with decayed radius and length.  Radii taper
strictly along every edge.  All tube surfaces stay inside a content
sphere, which in turn sits inside the detector field of view, so
projections never truncate the object.

A rendered sample bundles everything one view of one phantom provides:
the normalized projection, the smoothed occupancy volume, the voxel
point cloud of its support, and a first-hit depth map with its validity
mask.  The projection is produced by the same forward operator used for
reconstruction, so stored measurements and in-loop projections agree
bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit
from scipy.ndimage import gaussian_filter

from .geometry import ConeBeamGeometry
from .metrics import PointCloud
from .projector import VoxelGrid, forward_project, first_hit_depth
from . import io as gio

HALO_CUTOFF = 1e-3          # relative floor applied after smoothing
DEPTH_LEVEL = 0.5           # fraction of volume max that counts as surface


@dataclass
class TreeParams:
    depth: int = 5                   # branching levels
    subsegments: int = 3             # capsule segments per branch
    root_radius: float = 0.030
    radius_decay: float = 0.70       # mean child/parent radius ratio
    min_radius: float = 0.0155       # keeps twigs >= ~1 voxel at 128^3
    segment_length: float = 0.48     # root branch length
    length_decay: float = 0.75
    branch_angle: float = 0.6        # mean half-angle between children
    jitter: float = 0.25
    content_radius: float = 0.9      # all tube surfaces stay inside this

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("tree depth must be >= 1")
        if not 0.0 < self.radius_decay < 1.0:
            raise ValueError("radius decay must be in (0, 1)")
        if self.subsegments < 1:
            raise ValueError("need at least one segment per branch")
        if self.root_radius <= 0 or self.min_radius <= 0:
            raise ValueError("radii must be positive")
        if self.content_radius <= self.root_radius:
            raise ValueError("content sphere too small for the root tube")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class VesselTree:
    nodes: np.ndarray       # (M, 3) world points
    radii: np.ndarray       # (M,)
    edges: np.ndarray       # (E, 2) parent -> child node indices

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64).reshape(-1, 3)
        self.radii = np.ascontiguousarray(self.radii, dtype=np.float64).reshape(-1)
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.validate()

    def validate(self):
        m = self.nodes.shape[0]
        if self.radii.shape[0] != m:
            raise ValueError("one radius per node required")
        if not (np.all(np.isfinite(self.nodes)) and np.all(self.radii > 0)):
            raise ValueError("invalid node data")
        e = self.edges.shape[0]
        if e != m - 1:
            raise ValueError("a tree on M nodes has exactly M-1 edges")
        if e and (self.edges.min() < 0 or self.edges.max() >= m):
            raise ValueError("edge index out of range")
        # connected + acyclic: every non-root node has exactly one parent,
        # and walking parents reaches the root
        parent = np.full(m, -1, dtype=np.int64)
        for a, b in self.edges:
            if parent[b] != -1:
                raise ValueError("node has two parents")
            parent[b] = a
        if m and parent[0] != -1:
            raise ValueError("node 0 must be the root")
        for i in range(1, m):
            seen = 0
            j = i
            while j != 0:
                j = parent[j]
                if j < 0 or seen > m:
                    raise ValueError("disconnected or cyclic tree")
                seen += 1
        # strict taper along every edge
        if e and not np.all(self.radii[self.edges[:, 1]] < self.radii[self.edges[:, 0]]):
            raise ValueError("child radius must be strictly below parent radius")

    @property
    def n_edges(self):
        return int(self.edges.shape[0])

    def max_reach(self) -> float:
        """Upper bound on |surface point| over all tubes (tight at nodes)."""
        return float(np.max(np.linalg.norm(self.nodes, axis=1) + self.radii))

    def total_tube_volume(self) -> float:
        """Sum of tapered-capsule volumes, ignoring overlaps at joints."""
        a = self.nodes[self.edges[:, 0]]
        b = self.nodes[self.edges[:, 1]]
        ra = self.radii[self.edges[:, 0]]
        rb = self.radii[self.edges[:, 1]]
        length = np.linalg.norm(b - a, axis=1)
        cone = np.pi / 3.0 * length * (ra * ra + ra * rb + rb * rb)
        return float(np.sum(cone))


def _unit(v):
    return v / np.linalg.norm(v)


def _perp_basis(d):
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(np.cross(d, helper))
    return e1, np.cross(d, e1)


def generate_tree(seed: int, params: TreeParams | None = None) -> VesselTree:
    """Deterministic random vascular tree, all surfaces inside the content sphere."""
    p = params or TreeParams()
    rng = np.random.default_rng(seed)

    start_dir = _unit(rng.standard_normal(3))
    root = -0.72 * p.content_radius * start_dir
    nodes = [root]
    radii = [p.root_radius]
    edges = []

    def grow(anchor: int, direction, radius, length, level):
        d = direction
        cur = anchor
        r = radii[anchor]
        step = length / p.subsegments
        for _ in range(p.subsegments):
            d = _unit(d + p.jitter * 0.6 * rng.standard_normal(3))
            r = max(r * 0.985, p.min_radius * 0.5)
            if r >= radii[cur]:                      # keep taper strict
                r = radii[cur] * 0.995
            nxt = nodes[cur] + step * d
            reach = np.linalg.norm(nxt) + r
            if reach > 0.96 * p.content_radius:
                # steer back toward the center and retry once
                d = _unit(d - 1.6 * _unit(nxt))
                nxt = nodes[cur] + step * d
                if np.linalg.norm(nxt) + r > 0.98 * p.content_radius:
                    break                            # terminate early
            nodes.append(nxt)
            radii.append(r)
            edges.append((cur, len(nodes) - 1))
            cur = len(nodes) - 1
        if level + 1 >= p.depth or cur == anchor:
            return
        e1, e2 = _perp_basis(d)
        azimuth = rng.uniform(0, 2 * np.pi)
        for k in range(2):
            theta = p.branch_angle * (1.0 + p.jitter * rng.uniform(-1, 1))
            phi = azimuth + k * np.pi + p.jitter * rng.uniform(-1, 1)
            child_dir = _unit(np.cos(theta) * d +
                              np.sin(theta) * (np.cos(phi) * e1 + np.sin(phi) * e2))
            decay = p.radius_decay * (1.0 + 0.3 * p.jitter * rng.uniform(-1, 1))
            child_r = max(min(decay, 0.999) * radii[cur], p.min_radius)
            if child_r >= radii[cur]:
                child_r = radii[cur] * 0.995
            child_len = length * p.length_decay * (1.0 + p.jitter * rng.uniform(-0.5, 0.5))
            grow(cur, child_dir, child_r, child_len, level + 1)

    grow(0, _unit(start_dir + p.jitter * rng.standard_normal(3)),
         p.root_radius, p.segment_length, 0)
    tree = VesselTree(np.array(nodes), np.array(radii), np.array(edges))
    if tree.max_reach() > p.content_radius:
        raise AssertionError("tree escaped the content sphere")
    return tree


@njit(cache=True)
def _fill_tubes(nodes, radii, edges, ox, oy, oz, h, out):
    nx, ny, nz = out.shape
    for e in range(edges.shape[0]):
        ia = edges[e, 0]
        ib = edges[e, 1]
        ax, ay, az = nodes[ia, 0], nodes[ia, 1], nodes[ia, 2]
        bx, by, bz = nodes[ib, 0], nodes[ib, 1], nodes[ib, 2]
        ra = radii[ia]
        rb = radii[ib]
        rmax = max(ra, rb)
        lox = min(ax, bx) - rmax
        loy = min(ay, by) - rmax
        loz = min(az, bz) - rmax
        hix = max(ax, bx) + rmax
        hiy = max(ay, by) + rmax
        hiz = max(az, bz) + rmax
        ilo = max(0, int(np.ceil((lox - ox) / h - 0.5)))
        ihi = min(nx - 1, int(np.floor((hix - ox) / h - 0.5)))
        jlo = max(0, int(np.ceil((loy - oy) / h - 0.5)))
        jhi = min(ny - 1, int(np.floor((hiy - oy) / h - 0.5)))
        klo = max(0, int(np.ceil((loz - oz) / h - 0.5)))
        khi = min(nz - 1, int(np.floor((hiz - oz) / h - 0.5)))
        ux = bx - ax
        uy = by - ay
        uz = bz - az
        seg2 = ux * ux + uy * uy + uz * uz
        for i in range(ilo, ihi + 1):
            px = ox + (i + 0.5) * h - ax
            for j in range(jlo, jhi + 1):
                py = oy + (j + 0.5) * h - ay
                for k in range(klo, khi + 1):
                    pz = oz + (k + 0.5) * h - az
                    t = 0.0
                    if seg2 > 0.0:
                        t = (px * ux + py * uy + pz * uz) / seg2
                        if t < 0.0:
                            t = 0.0
                        elif t > 1.0:
                            t = 1.0
                    dx = px - t * ux
                    dy = py - t * uy
                    dz = pz - t * uz
                    r = ra + t * (rb - ra)
                    if dx * dx + dy * dy + dz * dz <= r * r:
                        out[i, j, k] = 1.0


def voxelize_binary(tree: VesselTree, geom: ConeBeamGeometry) -> VoxelGrid:
    """Hard occupancy: 1 where the voxel center is inside any tapered capsule."""
    out = np.zeros(geom.volume_shape)
    if tree.n_edges:
        _fill_tubes(tree.nodes, tree.radii, tree.edges,
                    geom.volume_origin[0], geom.volume_origin[1], geom.volume_origin[2],
                    geom.voxel_size, out)
    return VoxelGrid(out, geom.voxel_size, geom.volume_origin)


def voxelize_tree(tree: VesselTree, geom: ConeBeamGeometry,
                  smoothing_sigma: float = 0.5) -> VoxelGrid:
    """Occupancy smoothed for band-limited projections.

    Values stay in [0, 1]; the smoothing halo below HALO_CUTOFF * max is
    zeroed so the support (and thus the sample's point cloud) stays close
    to the true tubes instead of trailing off with the Gaussian tail."""
    binary = voxelize_binary(tree, geom)
    if smoothing_sigma <= 0 or not binary.data.any():
        return binary
    data = gaussian_filter(binary.data, sigma=smoothing_sigma)
    data[data < HALO_CUTOFF * data.max()] = 0.0
    return binary.like(data)


@dataclass
class TrainingSample:
    """One phantom seen from one angle, plus its volumetric ground truth."""
    angle: float
    volume: VoxelGrid            # smoothed occupancy, values in [0, 1]
    points: PointCloud           # voxel centers of the volume's support
    projection: np.ndarray       # (rows, cols), normalized to [0, 1]
    proj_scale: float            # multiply to undo the normalization
    depth: np.ndarray            # (rows, cols), +inf where no hit
    mask: np.ndarray             # (rows, cols) uint8, 1 iff depth finite
    occupancy: float             # binary occupancy fraction pre-smoothing


def support_points(vol: VoxelGrid) -> PointCloud:
    idx = np.argwhere(vol.data > 0)
    return PointCloud(vol.voxel_centers(idx)) if idx.size else PointCloud(np.zeros((0, 3)))


def render_sample(tree: VesselTree, geom: ConeBeamGeometry, angle: float,
                  smoothing_sigma: float = 0.5) -> TrainingSample:
    binary = voxelize_binary(tree, geom)
    occupancy = float(binary.data.mean())
    vol = voxelize_tree(tree, geom, smoothing_sigma) if smoothing_sigma > 0 else binary
    proj = forward_project(vol, geom, [angle]).images[0]
    scale = float(proj.max())
    if scale > 0:
        proj = proj / scale
    else:
        scale = 1.0
    vmax = float(vol.data.max())
    depth = first_hit_depth(vol, geom, [angle],
                            threshold=DEPTH_LEVEL * vmax if vmax > 0 else 0.5)[0]
    mask = np.isfinite(depth).astype(np.uint8)
    return TrainingSample(angle=float(angle), volume=vol, points=support_points(vol),
                          projection=proj, proj_scale=scale, depth=depth,
                          mask=mask, occupancy=occupancy)


# ------------------------------------------------------------ dataset I/O

def _sample_dir(root: str, index: int) -> str:
    return os.path.join(root, f"case_{index:04d}")


def write_sample(case_dir: str, geom: ConeBeamGeometry, tree: VesselTree,
                 angles, smoothing_sigma: float = 0.5,
                 store_volume: bool = True) -> dict:
    """Render one phantom at several angles and write the quintuplet files."""
    os.makedirs(case_dir, exist_ok=True)
    entry: dict = {"angles": [float(a) for a in angles], "files": {}}
    first = None
    for vi, angle in enumerate(angles):
        s = render_sample(tree, geom, angle, smoothing_sigma)
        if first is None:
            first = s
            entry["occupancy"] = s.occupancy
            if store_volume:
                gio.save_volume(os.path.join(case_dir, "volume.raw"), s.volume,
                                {"occupancy": s.occupancy})
                entry["files"]["volume"] = "volume.raw"
            gio.save_points(os.path.join(case_dir, "points.pc"), s.points)
            entry["files"]["points"] = "points.pc"
        meta = {"angle": float(angle), "proj_scale": s.proj_scale}
        gio.write_array(os.path.join(case_dir, f"proj_{vi:03d}.raw"), s.projection, meta)
        depth_store = np.where(s.mask > 0, s.depth, np.float32(np.inf))
        # float32 +inf is representable; keep it for the invalid pixels
        with np.errstate(over="ignore"):
            gio.write_array(os.path.join(case_dir, f"depth_{vi:03d}.raw"),
                            depth_store, meta)
        gio.write_array(os.path.join(case_dir, f"mask_{vi:03d}.raw"),
                        s.mask.astype(np.float64), meta)
    entry["files"]["projections"] = [f"proj_{vi:03d}.raw" for vi in range(len(angles))]
    entry["files"]["depths"] = [f"depth_{vi:03d}.raw" for vi in range(len(angles))]
    entry["files"]["masks"] = [f"mask_{vi:03d}.raw" for vi in range(len(angles))]
    return entry


def build_dataset(out_dir: str, geom: ConeBeamGeometry, angles, n_samples: int,
                  seed0: int = 0, params: TreeParams | None = None,
                  smoothing_sigma: float = 0.5, store_volume: bool = True) -> dict:
    """Generate n_samples phantoms and write the dataset tree + manifest."""
    params = params or TreeParams()
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": 1,
        "geometry": geom.to_dict(),
        "angles": [float(a) for a in angles],
        "smoothing_sigma": smoothing_sigma,
        "tree_params": params.to_dict(),
        "samples": [],
    }
    for i in range(n_samples):
        seed = seed0 + i
        tree = generate_tree(seed, params)
        case = f"case_{i:04d}"
        entry = write_sample(_sample_dir(out_dir, i), geom, tree, angles,
                             smoothing_sigma, store_volume)
        entry.update({"id": case, "seed": seed, "dir": case})
        manifest["samples"].append(entry)
    gio.write_json(os.path.join(out_dir, "dataset.json"), manifest)
    return manifest


def load_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, "dataset.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return gio.read_json(path)


def load_sample_projections(dataset_dir: str, entry: dict, geom: ConeBeamGeometry):
    """Measured projections for one manifest entry, denormalized."""
    from .projector import ProjectionSet
    case_dir = os.path.join(dataset_dir, entry["dir"])
    images = []
    for name in entry["files"]["projections"]:
        arr, meta = gio.read_array(os.path.join(case_dir, name))
        images.append(arr * float(meta["proj_scale"]))
    return ProjectionSet(geom, np.asarray(entry["angles"]), np.stack(images))
