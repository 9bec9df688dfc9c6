"""File formats: raw arrays with text sidecars, point-cloud interchange,
JSON documents.

Every array goes to disk as little-endian float32 in C order next to a
plain-text ``.hdr`` sidecar holding shape/dtype plus free-form metadata.
Point clouds use a single self-describing file: a short ASCII header
(magic, count, column names), one blank line, then the binary body.
Nothing here writes timestamps or absolute paths, so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .gaussians import GaussianCloud
from .metrics import PointCloud
from .projector import VoxelGrid

PC_MAGIC = "GCAR-PC1"
CLOUD_COLUMNS = ("x", "y", "z", "sx", "sy", "sz", "qw", "qx", "qy", "qz", "a")


# ------------------------------------------------------------ raw arrays

def _header_path(raw_path: str) -> str:
    base, _ = os.path.splitext(raw_path)
    return base + ".hdr"


def write_array(path: str, arr: np.ndarray, meta: dict | None = None):
    """Write ``arr`` as little-endian float32 plus a text header sidecar."""
    data = np.ascontiguousarray(arr, dtype="<f4")
    lines = [f"shape: {' '.join(str(s) for s in data.shape)}",
             "dtype: float32",
             "byte_order: little"]
    for key in sorted(meta or {}):
        value = (meta or {})[key]
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, (list, tuple, np.ndarray)):
            value = " ".join(repr(float(v)) for v in np.asarray(value).ravel())
        lines.append(f"{key}: {value}")
    with open(_header_path(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    data.tofile(path)


def read_array(path: str):
    """Read a raw array written by :func:`write_array` -> (array, meta)."""
    meta = {}
    with open(_header_path(path)) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    if meta.get("dtype") != "float32" or meta.get("byte_order") != "little":
        raise ValueError(f"unsupported array encoding in {path}")
    shape = tuple(int(s) for s in meta["shape"].split())
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape)) if shape else data.size
    if data.size != expected:
        raise ValueError(f"{path}: body holds {data.size} values, header says {expected}")
    return data.reshape(shape).astype(np.float64), meta


def meta_floats(meta: dict, key: str) -> np.ndarray:
    return np.array([float(v) for v in meta[key].split()])


def save_volume(path: str, vol: VoxelGrid, extra: dict | None = None):
    meta = {"voxel_size": vol.voxel_size, "origin": vol.origin}
    meta.update(extra or {})
    write_array(path, vol.data, meta)


def load_volume(path: str):
    data, meta = read_array(path)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3D volume")
    origin = tuple(meta_floats(meta, "origin"))
    return VoxelGrid(data, float(meta["voxel_size"]), origin), meta


# ----------------------------------------------------------- point clouds

def write_pointcloud(path: str, rows: np.ndarray, columns=("x", "y", "z")):
    """Write an (N, C) array under the point-cloud interchange format."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(-1, len(columns))
    if rows.shape[1] != len(columns):
        raise ValueError("column list does not match row width")
    if len(columns) < 3 or tuple(columns[:3]) != ("x", "y", "z"):
        raise ValueError("columns must start with x y z")
    header = (f"{PC_MAGIC}\n"
              f"count: {rows.shape[0]}\n"
              f"columns: {' '.join(columns)}\n"
              "\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_pointcloud(path: str):
    """Read the interchange format -> (rows (N, C) float64, column names)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing header terminator")
    header_lines = blob[:sep].decode("ascii", errors="replace").split("\n")
    if not header_lines or header_lines[0] != PC_MAGIC:
        raise ValueError(f"{path}: bad magic, not a point-cloud file")
    fields = {}
    for line in header_lines[1:]:
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        count = int(fields["count"])
        columns = tuple(fields["columns"].split())
    except KeyError as exc:
        raise ValueError(f"{path}: header missing {exc}") from exc
    if count < 0 or len(columns) < 3 or columns[:3] != ("x", "y", "z"):
        raise ValueError(f"{path}: invalid header")
    body = blob[sep + 2:]
    expected = count * len(columns) * 4
    if len(body) != expected:
        raise ValueError(f"{path}: body is {len(body)} bytes, header implies {expected}")
    rows = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, len(columns))
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"{path}: non-finite values in body")
    return rows, columns


def save_points(path: str, pc: PointCloud):
    write_pointcloud(path, pc.points)


def load_points(path: str) -> PointCloud:
    rows, _ = read_pointcloud(path)
    return PointCloud(rows[:, :3])


def save_cloud(path: str, cloud: GaussianCloud):
    """Gaussian cloud as the point-cloud format with extra parameter columns."""
    rows = np.concatenate([cloud.centers, cloud.log_scales, cloud.rotations,
                           cloud.raw_intensities[:, None]], axis=1)
    write_pointcloud(path, rows, CLOUD_COLUMNS)


def load_cloud(path: str) -> GaussianCloud:
    rows, columns = read_pointcloud(path)
    if columns != CLOUD_COLUMNS:
        raise ValueError(f"{path}: expected full Gaussian columns, got {columns}")
    # float32 storage perturbs quaternion norms; restore the invariant first
    quats = rows[:, 6:10]
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(norms < 0.5):
        raise ValueError(f"{path}: degenerate quaternion row")
    return GaussianCloud(rows[:, 0:3], rows[:, 3:6], quats / norms, rows[:, 10])


# ------------------------------------------------------------------ JSON

def write_json(path: str, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)
