"""Binary checkpoints: model, optimizer, density statistics, detector state and RNG.

Layout (little-endian)::

    b"NVS4" | u32 version | u32 section count | sections... | u32 crc32 of all preceding bytes

Each section is ``u16 name length, name, u8 kind`` followed by either a JSON
payload (kind 0: ``u64 length, utf-8``) or an array (kind 1: ``u8 dtype code,
u8 ndim, u64 dims..., raw bytes``). Sections are written in sorted name order so
identical states produce identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorSet, DensifyStats, GaussianHeads
from .core_math import AdamState, Mlp
from .errors import CheckpointError
from .hexplane import DeformationDecoders, HexPlaneField
from .model import NeuralVoxelModel
from .renderer import Camera

MAGIC = b"NVS4"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("<u8"), 3: np.dtype("|b1")}
_CODES = {v: k for k, v in _DTYPES.items()}
_KIND_DTYPE = {"f": _DTYPES[0], "i": _DTYPES[1], "u": _DTYPES[2], "b": _DTYPES[3]}


@dataclass
class Checkpoint:
    model: NeuralVoxelModel
    config: dict = field(default_factory=dict)
    trainer: dict | None = None  # everything needed to resume; None for a bare model
    arrays: dict = field(default_factory=dict, repr=False)
    cameras: list[Camera] = field(default_factory=list)


# ---------------------------------------------------------------------------
# encoding


def _encode(sections: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(sections))
    for name in sorted(sections):
        value = sections[name]
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            dt = _KIND_DTYPE.get(arr.dtype.kind)
            if dt is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            out += struct.pack("<BBB", 1, _CODES[dt], arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += arr.astype(dt, copy=False).tobytes()
        else:
            payload = json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")
            out += struct.pack("<BQ", 0, len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def _decode(data: bytes) -> dict:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint is truncated or corrupted (checksum mismatch)")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    sections = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            kind = data[pos]
            if kind == 0:
                (length,) = struct.unpack_from("<Q", data, pos + 1)
                pos += 9
                sections[name] = json.loads(data[pos:pos + length].decode("utf-8"))
                pos += length
            elif kind == 1:
                code, ndim = data[pos + 1], data[pos + 2]
                shape = struct.unpack_from(f"<{ndim}Q", data, pos + 3)
                pos += 3 + 8 * ndim
                dt = _DTYPES[code]
                nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                if pos + nbytes > len(data) - 4:
                    raise CheckpointError(f"section {name} runs past the end of the file")
                sections[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                               offset=pos).reshape(shape).astype(dt.newbyteorder("="))
                pos += nbytes
            else:
                raise CheckpointError(f"unknown section kind {kind} for {name}")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(data) - 4:
        raise CheckpointError("trailing bytes after the last section")
    return sections


# ---------------------------------------------------------------------------
# model <-> sections


def _mlp_sections(prefix: str, net: Mlp, out: dict):
    out[f"{prefix}.activations"] = list(net.activations)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.{i}.weight"] = w
        out[f"{prefix}.{i}.bias"] = b


def _mlp_from(prefix: str, s: dict) -> Mlp:
    acts = s[f"{prefix}.activations"]
    return Mlp([s[f"{prefix}.{i}.weight"] for i in range(len(acts))],
               [s[f"{prefix}.{i}.bias"] for i in range(len(acts))], list(acts))


def camera_to_dict(cam: Camera) -> dict:
    d = dict(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width, height=cam.height,
             rotation=np.asarray(cam.rotation).tolist(), translation=np.asarray(cam.translation).tolist(),
             timestamp=cam.timestamp, near=cam.near, far=cam.far)
    if cam.source_c2w is not None:
        d["source_c2w"] = np.asarray(cam.source_c2w).tolist()
    return d


def camera_from_dict(d: dict) -> Camera:
    c2w = d.get("source_c2w")
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                  int(d["height"]), np.array(d["rotation"], dtype=np.float64),
                  np.array(d["translation"], dtype=np.float64), float(d.get("timestamp", 0.0)),
                  float(d.get("near", 0.01)), float(d.get("far", 100.0)),
                  None if c2w is None else np.array(c2w, dtype=np.float64))


def model_sections(model: NeuralVoxelModel) -> dict:
    s = {}
    a = model.anchors
    s["anchor.centers"] = a.centers
    s["anchor.features"] = a.features
    s["anchor.log_scales"] = a.log_scales
    s["anchor.offsets"] = a.offsets
    s["anchor.ids"] = a.ids.astype(np.int64)
    f = model.field
    for si, grids in enumerate(f.grids):
        for plane, g in grids.items():
            s[f"field.{si}.{plane}"] = g
    for name in ("opacity", "color", "scale", "rotation"):
        _mlp_sections(f"head.{name}", getattr(model.heads, name), s)
    for name in ("fuse", "position", "rotation", "scale"):
        _mlp_sections(f"deform.{name}", getattr(model.decoders, name), s)
    s["model.meta"] = dict(
        next_id=int(a.next_id), k=int(model.heads.k), voxel_size=model.voxel_size,
        reference_center=model.reference_center.tolist(), background=model.background.tolist(),
        bbox_min=np.asarray(f.bbox_min).tolist(), bbox_max=np.asarray(f.bbox_max).tolist(),
        base_resolution=list(f.base_resolution), multipliers=list(f.multipliers),
        planes=[list(g) for g in f.grids])
    return s


def model_from_sections(s: dict) -> NeuralVoxelModel:
    meta = s["model.meta"]
    anchors = AnchorSet(s["anchor.centers"], s["anchor.features"], s["anchor.log_scales"],
                        s["anchor.offsets"], s["anchor.ids"], int(meta["next_id"]))
    grids = [{p: s[f"field.{si}.{p}"] for p in planes} for si, planes in enumerate(meta["planes"])]
    fld = HexPlaneField(grids, np.array(meta["bbox_min"]), np.array(meta["bbox_max"]),
                        tuple(meta["base_resolution"]), tuple(meta["multipliers"]))
    heads = GaussianHeads(*(_mlp_from(f"head.{n}", s) for n in ("opacity", "color", "scale", "rotation")),
                          k=int(meta["k"]))
    decoders = DeformationDecoders(*(_mlp_from(f"deform.{n}", s) for n in ("fuse", "position", "rotation", "scale")))
    return NeuralVoxelModel(anchors, heads, fld, decoders, float(meta["voxel_size"]),
                            np.array(meta["reference_center"]), np.array(meta["background"]))


# ---------------------------------------------------------------------------
# public API


def save_checkpoint(obj, path, cameras=None) -> Path:
    """Write a :class:`Trainer` (resumable) or a bare :class:`NeuralVoxelModel`."""
    from .training import Trainer

    if isinstance(obj, Trainer):
        s = model_sections(obj.model)
        s.update(_trainer_sections(obj))
        if cameras is None and obj.dataset is not None:
            cameras = _distinct_cameras(obj.dataset)
    elif isinstance(obj, NeuralVoxelModel):
        s = model_sections(obj)
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    s["cameras"] = [camera_to_dict(c) for c in (cameras or [])]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(s))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    s = _decode(data)
    try:
        model = model_from_sections(s)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing section {exc}") from exc
    cameras = [camera_from_dict(d) for d in s.get("cameras", [])]
    return Checkpoint(model, s.get("trainer.config", {}), s.get("trainer.state"), s, cameras)


def _distinct_cameras(dataset) -> list[Camera]:
    seen = {}
    for fr in dataset.frames:
        seen.setdefault(fr.camera_id, fr.camera)
    return [seen[k] for k in sorted(seen)]


def _trainer_sections(tr) -> dict:
    s = {"trainer.config": tr.config.to_dict()}
    for name, st in tr.adam.items():
        s[f"adam.{name}.m"] = st.m
        s[f"adam.{name}.v"] = st.v
    st = tr.stats
    s["stats.grad_accum"] = st.grad_accum
    s["stats.grad_count"] = st.grad_count
    s["stats.opacity_sum"] = st.opacity_sum
    s["stats.opacity_count"] = st.opacity_count
    s["trainer.state"] = dict(
        stage=tr.stage, iteration=tr.iteration, step=tr.step, detector_calls=tr.detector_calls,
        adam={n: [a.t, a.beta1, a.beta2, a.eps] for n, a in sorted(tr.adam.items())},
        stats_window_start=int(st.window_start),
        psnr_tracker=[tr.psnr_tracker.value, tr.psnr_tracker.initialized, tr.psnr_tracker.momentum],
        grad_tracker=[tr.grad_tracker.value, tr.grad_tracker.initialized, tr.grad_tracker.momentum],
        stack=[[e.camera_id, e.failure_type, e.severity, e.hits, e.iteration]
               for e in sorted(tr.stack.values(), key=lambda e: e.camera_id)],
        rng=_jsonable(tr.rng.bit_generator.state),
        metrics=tr.metrics, refinement_report=tr.refinement_report)
    return s


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def restore_trainer(ckpt: Checkpoint, dataset):
    """Rebuild a :class:`Trainer` that continues exactly where the checkpoint left off."""
    from .training import EmaTracker, RefinementEntry, TrainConfig, Trainer

    if ckpt.trainer is None:
        raise CheckpointError("checkpoint holds a bare model, not a resumable training state")
    st = ckpt.trainer
    s = ckpt.arrays
    bitgen = getattr(np.random, st["rng"]["bit_generator"])()
    bitgen.state = st["rng"]
    rng = np.random.Generator(bitgen)
    tr = Trainer(dataset, TrainConfig.from_dict(ckpt.config), model=ckpt.model, rng=rng)
    tr.stage, tr.iteration, tr.step = st["stage"], st["iteration"], st["step"]
    tr.detector_calls = st["detector_calls"]
    tr.adam = {n: AdamState(s[f"adam.{n}.m"], s[f"adam.{n}.v"], int(t), b1, b2, eps)
               for n, (t, b1, b2, eps) in st["adam"].items()}
    tr.stats = DensifyStats(s["stats.grad_accum"], s["stats.grad_count"], s["stats.opacity_sum"],
                            s["stats.opacity_count"], st["stats_window_start"])
    tr.psnr_tracker = EmaTracker(st["psnr_tracker"][0], st["psnr_tracker"][1], st["psnr_tracker"][2])
    tr.grad_tracker = EmaTracker(st["grad_tracker"][0], st["grad_tracker"][1], st["grad_tracker"][2])
    tr.stack = {cid: RefinementEntry(cid, kind, sev, hits, it) for cid, kind, sev, hits, it in st["stack"]}
    tr.metrics = list(st["metrics"])
    tr.refinement_report = st["refinement_report"]
    return tr
