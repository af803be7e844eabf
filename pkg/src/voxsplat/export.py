"""Export deformed Gaussians as a binary PLY in the common splatting point layout."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import DatasetError, DomainError
from .model import NeuralVoxelModel

SH_C0 = 0.28209479177387814
_OPACITY_EPS = 1e-7

PLY_FIELDS = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
              + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])


def gaussian_records(model: NeuralVoxelModel, t: float) -> np.ndarray:
    """Structured float32 records for every Gaussian at time ``t``."""
    if not (math.isfinite(t) and 0.0 <= t <= 1.0):
        raise DomainError(f"export time must lie in [0, 1], got {t}")
    g = model.gaussians_at(t)
    rec = np.zeros(len(g), dtype=[(name, "<f4") for name in PLY_FIELDS])
    for i, axis in enumerate("xyz"):
        rec[axis] = g.mu[:, i]
    dc = (g.color.reshape(-1, 3) - 0.5) / SH_C0
    for i in range(3):
        rec[f"f_dc_{i}"] = dc[:, i]
    op = np.clip(g.opacity.reshape(-1), _OPACITY_EPS, 1.0 - _OPACITY_EPS)
    rec["opacity"] = np.log(op / (1.0 - op))
    for i in range(3):
        rec[f"scale_{i}"] = np.log(g.scale[:, i])
    q = g.rotation / np.linalg.norm(g.rotation, axis=1, keepdims=True)
    for i in range(4):
        rec[f"rot_{i}"] = q[:, i]
    return rec


def export_gaussians(model: NeuralVoxelModel, t: float, path) -> Path:
    rec = gaussian_records(model, t)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    return path


def read_ply(path) -> np.ndarray:
    """Read a binary little-endian PLY with a single float vertex element."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise DatasetError(f"{path}: only binary little-endian PLY is supported")
    count, names = 0, []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:2] == ["property", "float"]:
            names.append(parts[2])
    dtype = np.dtype([(n, "<f4") for n in names])
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * dtype.itemsize:
        raise DatasetError(f"{path}: expected {count} records, body has {len(body)} bytes")
    return np.frombuffer(body, dtype=dtype).copy()
