"""Readers and writers for the reconstruction engine's file formats.

This package talks to the engine only through its on-disk interfaces:
dataset directories (``dataset.json`` manifest, raw float32 arrays with
``.hdr`` text sidecars, ``points.pc`` ground-truth vessel points) and
the point-cloud interchange format it accepts as ``--init`` input.  The
formats are re-implemented here from their documented layout; nothing
imports the engine.
"""

from __future__ import annotations

import json
import os

import numpy as np

PC_MAGIC = "GCAR-PC1"


def _header_path(raw_path: str) -> str:
    base, _ = os.path.splitext(raw_path)
    return base + ".hdr"


def read_array(path: str):
    """Raw little-endian float32 body + text sidecar -> (array, meta)."""
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
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: body size does not match header shape")
    return data.reshape(shape), meta


def write_pointcloud(path: str, points: np.ndarray):
    """(N, 3) world positions in the engine's interchange format."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite point coordinates")
    header = f"{PC_MAGIC}\ncount: {points.shape[0]}\ncolumns: x y z\n\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(points, dtype="<f4").tobytes())


def read_pointcloud(path: str) -> np.ndarray:
    """Interchange format -> (N, >=3) float64 rows (extra columns kept)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing header terminator")
    lines = blob[:sep].decode("ascii", errors="replace").split("\n")
    if not lines or lines[0] != PC_MAGIC:
        raise ValueError(f"{path}: bad magic")
    fields = dict(line.partition(":")[::2] for line in lines[1:])
    fields = {k.strip(): v.strip() for k, v in fields.items()}
    count = int(fields["count"])
    columns = fields["columns"].split()
    body = blob[sep + 2:]
    if len(body) != count * len(columns) * 4:
        raise ValueError(f"{path}: body size does not match header")
    rows = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return rows.reshape(count, len(columns))


def load_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, "dataset.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("geometry", "angles", "samples"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest missing '{key}'")
    return manifest


def sample_paths(dataset_dir: str, entry: dict) -> dict:
    """Absolute paths of one manifest entry's files."""
    case_dir = os.path.join(dataset_dir, entry["dir"])
    files = entry["files"]
    out = {
        "projections": [os.path.join(case_dir, f) for f in files["projections"]],
        "depths": [os.path.join(case_dir, f) for f in files["depths"]],
        "masks": [os.path.join(case_dir, f) for f in files["masks"]],
        "points": os.path.join(case_dir, files["points"]),
    }
    if "volume" in files:
        out["volume"] = os.path.join(case_dir, files["volume"])
    return out
