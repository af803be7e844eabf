"""Multi-view, multi-time datasets: the ``transforms.json`` loader and a synthetic scene generator.

Directory layout::

    transforms.json
    images/*.png

``transforms.json`` holds ``frames``: a list of objects with ``file_path``,
``time``, ``transform_matrix`` (4x4 camera-to-world, OpenGL axes as in the
NeRF convention), ``fl_x``, ``fl_y``, ``cx``, ``cy``, ``w``, ``h`` and an
optional ``camera_id``; plus top-level ``points`` (``[[x, y, z], ...]``)
and optional ``bbox``, ``background``, ``near``, ``far``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core_math import covariance_from_scale_rotation
from .errors import DatasetError, DomainError
from .renderer import Camera, Splats, project_gaussians, rasterize_reference

_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    time: float
    camera_id: int
    file_path: str = ""


@dataclass
class Dataset:
    frames: list[Frame]
    points: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    raw_times: list[float] = field(default_factory=list)
    truth: "SyntheticTruth | None" = None
    spec: "SyntheticSpec | None" = None

    def __len__(self):
        return len(self.frames)

    @property
    def camera_ids(self) -> list[int]:
        return sorted({f.camera_id for f in self.frames})

    def frames_for(self, camera_id: int) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.camera_id == camera_id]

    def mean_camera_center(self) -> np.ndarray:
        return np.mean([f.camera.center for f in self.frames], axis=0)


def camera_from_c2w(c2w, fx, fy, cx, cy, w, h, time=0.0, near=0.01, far=100.0) -> Camera:
    c2w = np.asarray(c2w, dtype=np.float64)
    rot_c2w = c2w[:3, :3] @ _GL_TO_CV
    rot = rot_c2w.T
    return Camera(float(fx), float(fy), float(cx), float(cy), int(w), int(h), rot,
                  -rot @ c2w[:3, 3], float(time), near, far, c2w.copy())


def camera_to_c2w(camera: Camera) -> np.ndarray:
    if camera.source_c2w is not None:
        return camera.source_c2w.copy()
    out = np.eye(4)
    out[:3, :3] = camera.rotation.T @ _GL_TO_CV
    out[:3, 3] = camera.center
    return out


def normalize_times(times) -> list[float]:
    times = [float(t) for t in times]
    if not all(math.isfinite(t) for t in times):
        raise DomainError("non-finite timestamp")
    lo, hi = min(times), max(times)
    if hi == lo:
        return [0.0 for _ in times]
    return [(t - lo) / (hi - lo) for t in times]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DatasetError(f"{where}: missing field '{key}'")
    return obj[key]


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "transforms.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{meta_path}: not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: invalid JSON ({exc})") from None
    frames_meta = _require(meta, "frames", "transforms.json")
    if not isinstance(frames_meta, list) or not frames_meta:
        raise DatasetError("transforms.json: 'frames' must be a non-empty list")
    near = float(meta.get("near", 0.01))
    far = float(meta.get("far", 100.0))
    raw_times = []
    for i, fm in enumerate(frames_meta):
        raw_times.append(_require(fm, "time", f"frames[{i}]"))
    try:
        times = normalize_times(raw_times)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"frames: bad 'time' value ({exc})") from None
    frames = []
    pose_ids: dict[bytes, int] = {}
    for i, (fm, t) in enumerate(zip(frames_meta, times)):
        where = f"frames[{i}]"
        rel = _require(fm, "file_path", where)
        path = directory / rel
        if not path.suffix and not path.exists():
            path = path.with_suffix(".png")
        if not path.exists():
            raise DatasetError(f"{where}: image '{rel}' not found")
        try:
            c2w = np.asarray(_require(fm, "transform_matrix", where), dtype=np.float64)
            if c2w.shape != (4, 4):
                raise ValueError("transform_matrix must be 4x4")
            cam = camera_from_c2w(c2w, _require(fm, "fl_x", where), _require(fm, "fl_y", where),
                                  _require(fm, "cx", where), _require(fm, "cy", where),
                                  _require(fm, "w", where), _require(fm, "h", where), t, near, far)
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {exc}") from None
        image = load_image(path)
        if image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{where}: image size {image.shape[1]}x{image.shape[0]} "
                               f"does not match w/h {cam.width}x{cam.height}")
        if "camera_id" in fm:
            cid = int(fm["camera_id"])
        else:
            cid = pose_ids.setdefault(c2w.tobytes(), len(pose_ids))
        frames.append(Frame(cam, image, t, cid, str(rel)))
    points = np.asarray(_require(meta, "points", "transforms.json"), dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DatasetError("transforms.json: 'points' is empty")
    if "bbox" in meta:
        bbox = np.asarray(meta["bbox"], dtype=np.float64).reshape(2, 3)
        lo, hi = bbox[0], bbox[1]
    else:
        lo, hi = _padded_bbox(points)
    bg = np.asarray(meta.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    return Dataset(frames, points, lo, hi, bg, [float(t) for t in raw_times])


def _padded_bbox(points, pad=0.1):
    lo, hi = points.min(axis=0), points.max(axis=0)
    margin = np.maximum(hi - lo, 1e-3) * pad
    return lo - margin, hi + margin


def write_dataset(dataset: Dataset, directory) -> Path:
    """Write ``dataset`` in the format read by :func:`load_dataset`."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    frames_meta = []
    raw = dataset.raw_times or [f.time for f in dataset.frames]
    for i, (fr, t) in enumerate(zip(dataset.frames, raw)):
        rel = fr.file_path or f"images/frame_{i:04d}.png"
        img = np.clip(np.rint(fr.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(directory / rel)
        cam = fr.camera
        frames_meta.append({
            "file_path": rel, "time": t, "camera_id": fr.camera_id,
            "transform_matrix": camera_to_c2w(cam).tolist(),
            "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy, "w": cam.width, "h": cam.height,
        })
    cam0 = dataset.frames[0].camera
    meta = {
        "frames": frames_meta,
        "points": dataset.points.tolist(),
        "bbox": [dataset.bbox_min.tolist(), dataset.bbox_max.tolist()],
        "background": dataset.background.tolist(),
        "near": cam0.near, "far": cam0.far,
    }
    (directory / "transforms.json").write_text(json.dumps(meta, indent=1))
    return directory


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSpec:
    width: int = 48
    height: int = 48
    n_cameras: int = 4
    n_times: int = 8
    amplitude: float = 0.4
    n_blobs: int = 6
    wobble: float = 0.25
    focal: float = 50.0
    radius: float = 3.0
    arc_degrees: float = 90.0
    elevation_degrees: float = 15.0
    hard_camera: bool = False
    hard_radius: float = 1.4
    samples_per_blob: int = 24

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise DatasetError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SyntheticTruth:
    centers: np.ndarray  # (B, 3) at t = 0
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    phases: np.ndarray

    def positions(self, t: float, spec: SyntheticSpec) -> np.ndarray:
        shift = np.array([spec.amplitude * t, 0.0, 0.0])
        wob = spec.wobble * spec.amplitude * np.sin(2 * np.pi * t + self.phases)
        return self.centers + shift + np.stack([np.zeros_like(wob), wob, np.zeros_like(wob)], axis=1)


def _orbit_camera(azimuth, elevation, radius, spec: SyntheticSpec) -> Camera:
    eye = radius * np.array([math.sin(azimuth) * math.cos(elevation), -math.sin(elevation),
                             -math.cos(azimuth) * math.cos(elevation)])
    cam = Camera.look_at(eye, np.zeros(3), spec.width, spec.height, spec.focal)
    # route through the file representation so written datasets reload bit-exactly
    return camera_from_c2w(camera_to_c2w(cam), cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


def render_truth(truth: SyntheticTruth, spec: SyntheticSpec, camera: Camera, t: float) -> np.ndarray:
    mu = truth.positions(t, spec)
    sigma = covariance_from_scale_rotation(truth.scales, truth.rotations)
    means, covs, depths, keep, _ = project_gaussians(mu, sigma, camera)
    splats = Splats(means, covs, depths, truth.colors[keep], truth.opacities[keep], np.nonzero(keep)[0])
    return rasterize_reference(splats, camera.height, camera.width)


def generate_synthetic_scene(spec: SyntheticSpec | None = None, seed: int = 0) -> Dataset:
    """A cluster of opaque colored Gaussians translating along +x, with a per-blob y wobble.

    Ground-truth frames come from the untiled reference rasterizer and are
    quantized to 8 bits so a written copy reloads exactly.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    b = spec.n_blobs
    centers = rng.uniform(-0.45, 0.45, size=(b, 3)) - np.array([spec.amplitude / 2, 0.0, 0.0])
    truth = SyntheticTruth(
        centers,
        rng.uniform(0.06, 0.16, size=(b, 3)),
        rng.normal(size=(b, 4)),
        rng.uniform(0.15, 1.0, size=(b, 3)),
        np.full(b, 0.95),
        rng.uniform(0, 2 * np.pi, size=b),
    )
    elev = math.radians(spec.elevation_degrees)
    if spec.n_cameras == 1:
        azimuths = [0.0]
    else:
        half = math.radians(spec.arc_degrees) / 2
        azimuths = list(np.linspace(-half, half, spec.n_cameras))
    cameras = [_orbit_camera(a, elev, spec.radius, spec) for a in azimuths]
    if spec.hard_camera:
        cameras.append(_orbit_camera(math.radians(20.0), -elev, spec.hard_radius, spec))
    times = [i / (spec.n_times - 1) if spec.n_times > 1 else 0.0 for i in range(spec.n_times)]
    frames = []
    for cid, cam in enumerate(cameras):
        for ti, t in enumerate(times):
            img = render_truth(truth, spec, cam, t)
            img = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
            frames.append(Frame(cam.with_time(t), img, t, cid, f"images/c{cid:02d}_t{ti:03d}.png"))
    pts = []
    for i in range(b):
        cov = covariance_from_scale_rotation(truth.scales[i], truth.rotations[i])
        base = truth.positions(0.5, spec)[i]
        pts.append(base[None, :])
        pts.append(rng.multivariate_normal(base, cov, size=spec.samples_per_blob))
    points = np.concatenate(pts)
    span = np.array([1.0, 1.0, 1.0])
    lo = -span - np.array([spec.amplitude, spec.amplitude, 0.0])
    hi = span + np.array([spec.amplitude, spec.amplitude, 0.0])
    return Dataset(frames, points, lo, hi, np.zeros(3), [f.time for f in frames], truth, spec)


def load_spec_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)
