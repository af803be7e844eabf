"""Six-plane factorized space-time feature field and geometry-only deformation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core_math import Mlp, normalize_quaternion
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)

PLANES = ("xy", "xz", "yz", "xt", "yt", "zt")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2), "xt": (0, 3), "yt": (1, 3), "zt": (2, 3)}
SCALE_MIN = 1e-6


@dataclass
class HexPlaneField:
    """``grids[scale][plane]`` has shape ``(R_a, R_b, h)`` for the plane's two axes."""

    grids: list[dict[str, np.ndarray]]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    base_resolution: tuple[int, int, int, int]
    multipliers: tuple[int, ...]

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ContractError("degenerate field bounding box")

    @classmethod
    def create(cls, bbox_min, bbox_max, base_resolution=(64, 64, 64, 25), multipliers=(1, 2),
               feature_dim=16, rng=None, init_range=0.1) -> "HexPlaneField":
        rng = rng if rng is not None else np.random.default_rng(0)
        grids = []
        for mult in multipliers:
            res = [r * mult for r in base_resolution[:3]] + [base_resolution[3]]
            planes = {}
            for name in PLANES:
                a, b = PLANE_AXES[name]
                planes[name] = rng.uniform(-init_range, init_range, size=(res[a], res[b], feature_dim))
            grids.append(planes)
        return cls(grids, bbox_min, bbox_max, tuple(base_resolution), tuple(multipliers))

    @property
    def feature_dim(self) -> int:
        return self.grids[0]["xy"].shape[-1]

    @property
    def output_dim(self) -> int:
        return self.feature_dim * len(self.grids)

    def named_parameters(self, prefix="field") -> dict[str, np.ndarray]:
        return {f"{prefix}.{s}.{p}": g for s, planes in enumerate(self.grids) for p, g in planes.items()}

    def parameter_count(self) -> int:
        return sum(g.size for g in self.named_parameters().values())


def _grid_coords(field: HexPlaneField, xyz: np.ndarray, t: np.ndarray, res: list[int]):
    """Continuous grid coordinates per axis and their derivative w.r.t. world coordinates."""
    span = field.bbox_max - field.bbox_min
    unit = (xyz - field.bbox_min) / span
    u4 = np.concatenate([unit, t[:, None]], axis=1)
    inside = (u4 >= 0.0) & (u4 <= 1.0)
    u4 = np.clip(u4, 0.0, 1.0)
    scale = np.array(res, dtype=np.float64) - 1.0
    coords = u4 * scale
    dcoord = np.where(inside, scale / np.concatenate([span, [1.0]]), 0.0)
    return coords, dcoord


def _bilinear(grid, ca, cb):
    ra, rb = grid.shape[:2]
    ia = np.clip(np.floor(ca).astype(np.int64), 0, max(ra - 2, 0))
    ib = np.clip(np.floor(cb).astype(np.int64), 0, max(rb - 2, 0))
    fa = ca - ia
    fb = cb - ib
    ia1 = np.minimum(ia + 1, ra - 1)
    ib1 = np.minimum(ib + 1, rb - 1)
    v00, v01 = grid[ia, ib], grid[ia, ib1]
    v10, v11 = grid[ia1, ib], grid[ia1, ib1]
    wa, wb = fa[:, None], fb[:, None]
    val = (1 - wa) * (1 - wb) * v00 + (1 - wa) * wb * v01 + wa * (1 - wb) * v10 + wa * wb * v11
    return val, (ia, ib, ia1, ib1, fa, fb, v00, v01, v10, v11)


def hexplane_query(field: HexPlaneField, xyz, t):
    """Features at points ``xyz`` (n, 3) and times ``t`` (scalar or (n,)).

    Within a resolution scale the six plane features are summed; scales are
    concatenated. Returns ``(features, backward)`` where ``backward(g)`` gives
    ``(grid_grads, g_xyz)`` with ``grid_grads`` keyed like ``named_parameters``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    single = xyz.ndim == 1
    xyz = xyz.reshape(-1, 3)
    n = len(xyz)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if np.any(np.isnan(xyz)) or np.any(np.isnan(t)):
        raise NumericError("NaN query coordinate")
    h = field.feature_dim
    feats = []
    caches = []
    for s, planes in enumerate(field.grids):
        res = [planes["xy"].shape[0], planes["xy"].shape[1], planes["xz"].shape[1], planes["xt"].shape[1]]
        coords, dcoord = _grid_coords(field, xyz, t, res)
        acc = np.zeros((n, h))
        for name in PLANES:
            a, b = PLANE_AXES[name]
            val, cache = _bilinear(planes[name], coords[:, a], coords[:, b])
            acc += val
            caches.append((s, name, a, b, cache))
        feats.append(acc)
        caches.append((s, None, None, None, dcoord))
    out = np.concatenate(feats, axis=1)

    def backward(g):
        g = np.asarray(g, dtype=np.float64).reshape(n, -1)
        grads = {}
        g_coord = {}
        g_xyz = np.zeros((n, 3))
        for s, name, a, b, cache in caches:
            gs = g[:, s * h:(s + 1) * h]
            if name is None:
                dc = cache
                gc = g_coord.pop(s)
                g_xyz += gc[:, :3] * dc[:, :3]
                continue
            ia, ib, ia1, ib1, fa, fb, v00, v01, v10, v11 = cache
            grid = field.grids[s][name]
            ra, rb = grid.shape[:2]
            wa, wb = fa[:, None], fb[:, None]
            acc = np.zeros((ra * rb, h))
            np.add.at(acc, ia * rb + ib, (1 - wa) * (1 - wb) * gs)
            np.add.at(acc, ia * rb + ib1, (1 - wa) * wb * gs)
            np.add.at(acc, ia1 * rb + ib, wa * (1 - wb) * gs)
            np.add.at(acc, ia1 * rb + ib1, wa * wb * gs)
            grads[f"field.{s}.{name}"] = acc.reshape(ra, rb, h)
            d_fa = np.sum(gs * ((1 - wb) * (v10 - v00) + wb * (v11 - v01)), axis=1)
            d_fb = np.sum(gs * ((1 - wa) * (v01 - v00) + wa * (v11 - v10)), axis=1)
            gc = g_coord.setdefault(s, np.zeros((n, 4)))
            gc[:, a] += d_fa
            gc[:, b] += d_fb
        return grads, (g_xyz[0] if single else g_xyz)

    return (out[0] if single else out), backward


def partition_weights(field: HexPlaneField, xyz, t) -> np.ndarray:
    """Bilinear weights per (point, scale, plane); each row of four sums to one."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(xyz),))
    out = []
    for planes in field.grids:
        res = [planes["xy"].shape[0], planes["xy"].shape[1], planes["xz"].shape[1], planes["xt"].shape[1]]
        coords, _ = _grid_coords(field, xyz, t, res)
        for name in PLANES:
            a, b = PLANE_AXES[name]
            _, (ia, ib, _, _, fa, fb, *_rest) = _bilinear(planes[name], coords[:, a], coords[:, b])
            out.append(np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=1))
    return np.stack(out, axis=1)


# ---------------------------------------------------------------------------
# deformation


@dataclass
class DeformationDecoders:
    fuse: Mlp  # phi_d
    position: Mlp
    rotation: Mlp
    scale: Mlp

    @classmethod
    def create(cls, in_dim: int, rng: np.random.Generator, hidden=64) -> "DeformationDecoders":
        fuse = Mlp.create([in_dim, hidden, hidden], rng, hidden="relu", out="relu")
        return cls(
            fuse,
            Mlp.create([hidden, 3], rng, zero_last=True),
            Mlp.create([hidden, 4], rng, zero_last=True),
            Mlp.create([hidden, 3], rng, zero_last=True),
        )

    def named_parameters(self, prefix="deform") -> dict[str, np.ndarray]:
        out = {}
        for name in ("fuse", "position", "rotation", "scale"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


@dataclass
class GaussianBatch:
    """A batch of 3D Gaussians; ``rotation`` is an unnormalized (w, x, y, z) quaternion."""

    mu: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    def __len__(self):
        return len(self.mu)


def _mlp_grads(prefix: str, net: Mlp, layer_grads) -> dict[str, np.ndarray]:
    out = {}
    for i, (gw, gb) in enumerate(layer_grads):
        out[f"{prefix}.{i}.weight"] = gw
        out[f"{prefix}.{i}.bias"] = gb
    return out


def deform_gaussians(gaussians: GaussianBatch, field: HexPlaneField, decoders: DeformationDecoders,
                     t: float, normalize_rotation: bool = False):
    """Deform position, rotation and scale at time ``t``; color and opacity pass through.

    The field is queried at the canonical positions. Rotation is updated
    additively; it is renormalized when the covariance is built unless
    ``normalize_rotation`` asks for it here. Returns ``(deformed, backward)``;
    ``backward(g)`` takes a :class:`GaussianBatch` of gradients and returns
    ``(param_grads, input_grads)``.
    """
    n = len(gaussians)
    if n == 0:
        return gaussians, lambda g: ({}, g)
    f_h, field_back = hexplane_query(field, gaussians.mu, t)
    f_d, fuse_back = decoders.fuse.forward(f_h)
    d_mu, pos_back = decoders.position.forward(f_d)
    d_rot, rot_back = decoders.rotation.forward(f_d)
    d_scale, scale_back = decoders.scale.forward(f_d)
    mu = gaussians.mu + d_mu
    rot = gaussians.rotation + d_rot
    if normalize_rotation:
        rot, norm_back = normalize_quaternion(rot)
    raw_scale = gaussians.scale + d_scale
    floored = raw_scale <= SCALE_MIN
    if np.any(floored):
        log.debug("clamped %d deformed scales to %g", int(floored.sum()), SCALE_MIN)
    scale = np.where(floored, SCALE_MIN, raw_scale)
    out = GaussianBatch(mu, rot, scale, gaussians.color, gaussians.opacity)

    def backward(g: GaussianBatch):
        g_rot = norm_back(g.rotation) if normalize_rotation else g.rotation
        g_scale = np.where(floored, 0.0, g.scale)
        g_fd_pos, lg_pos = pos_back(g.mu)
        g_fd_rot, lg_rot = rot_back(g_rot)
        g_fd_scale, lg_scale = scale_back(g_scale)
        g_fh, lg_fuse = fuse_back(g_fd_pos + g_fd_rot + g_fd_scale)
        grid_grads, g_xyz = field_back(g_fh)
        grads = dict(grid_grads)
        grads.update(_mlp_grads("deform.fuse", decoders.fuse, lg_fuse))
        grads.update(_mlp_grads("deform.position", decoders.position, lg_pos))
        grads.update(_mlp_grads("deform.rotation", decoders.rotation, lg_rot))
        grads.update(_mlp_grads("deform.scale", decoders.scale, lg_scale))
        g_in = GaussianBatch(g.mu + g_xyz, g_rot, g_scale, g.color, g.opacity)
        return grads, g_in

    return out, backward


def tv_loss(field: HexPlaneField):
    """Sum over planes and scales of the mean squared difference of neighbouring nodes.

    Returns ``(value, backward)``; ``backward(scale)`` returns grads keyed like
    ``field.named_parameters()``.
    """
    total = 0.0
    grads = {}
    for s, planes in enumerate(field.grids):
        for name, g in planes.items():
            gr = np.zeros_like(g)
            for axis in (0, 1):
                if g.shape[axis] < 2:
                    continue
                d = np.diff(g, axis=axis)
                total += float(np.mean(d * d))
                dd = 2.0 * d / d.size
                if axis == 0:
                    gr[1:] += dd
                    gr[:-1] -= dd
                else:
                    gr[:, 1:] += dd
                    gr[:, :-1] -= dd
            grads[f"field.{s}.{name}"] = gr

    def backward(scale=1.0):
        return {k: scale * v for k, v in grads.items()}

    return total, backward
