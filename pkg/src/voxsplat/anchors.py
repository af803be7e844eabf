"""Neural voxel anchors: lattice construction, culling, Gaussian generation and density control."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import Mlp, normalize_quaternion, sigmoid
from .errors import DegenerateInputError, DomainError
from .hexplane import GaussianBatch
from .renderer import Camera

FEATURE_DIM = 32
K_DEFAULT = 10
HEAD_HIDDEN = 32
RAW_SCALE_RANGE = (-10.0, 3.0)


@dataclass
class Anchor:
    center: np.ndarray
    feature: np.ndarray
    scale: np.ndarray
    offsets: np.ndarray
    id: int = 0


@dataclass
class AnchorSet:
    centers: np.ndarray  # (V, 3), fixed, on the eps lattice
    features: np.ndarray  # (V, F)
    log_scales: np.ndarray  # (V, 3)
    offsets: np.ndarray  # (V, k, 3)
    ids: np.ndarray  # (V,)
    next_id: int = 0

    def __len__(self):
        return len(self.centers)

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @classmethod
    def from_centers(cls, centers: np.ndarray, voxel: float, rng: np.random.Generator,
                     k: int = K_DEFAULT, feature_dim: int = FEATURE_DIM, offset_init: float = 0.5) -> "AnchorSet":
        v = len(centers)
        return cls(
            np.asarray(centers, dtype=np.float64).copy(),
            rng.normal(0.0, 0.1, size=(v, feature_dim)),
            np.full((v, 3), np.log(voxel)),
            rng.uniform(-offset_init, offset_init, size=(v, k, 3)),
            np.arange(v, dtype=np.int64),
            v,
        )

    def anchor(self, i: int) -> Anchor:
        return Anchor(self.centers[i], self.features[i], self.scales[i], self.offsets[i], int(self.ids[i]))

    def named_parameters(self, prefix="anchor") -> dict[str, np.ndarray]:
        return {f"{prefix}.features": self.features, f"{prefix}.log_scales": self.log_scales,
                f"{prefix}.offsets": self.offsets}

    def subset(self, keep: np.ndarray) -> "AnchorSet":
        return AnchorSet(self.centers[keep], self.features[keep], self.log_scales[keep],
                         self.offsets[keep], self.ids[keep], self.next_id)

    def canonical_positions(self) -> np.ndarray:
        """Gaussian means x_v + O * l_v, shape (V, k, 3)."""
        return self.centers[:, None, :] + self.offsets * self.scales[:, None, :]


# ---------------------------------------------------------------------------
# lattice


def _lattice_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel + 0.5).astype(np.int64)


def voxelize(points, voxel: float) -> np.ndarray:
    """Snap points to the nearest ``voxel`` lattice node and deduplicate.

    Returns unique centers in lexicographic order of their lattice indices.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DomainError("cannot voxelize an empty point set")
    if not voxel > 0:
        raise DomainError("voxel size must be positive")
    keys = np.unique(_lattice_keys(points, voxel), axis=0)
    return keys * voxel + 0.0


# ---------------------------------------------------------------------------
# culling


def frustum_planes(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Inward unit normals and offsets of the six frustum planes in camera space."""
    left = (-0.5 - camera.cx) / camera.fx
    right = (camera.width - 0.5 - camera.cx) / camera.fx
    top = (-0.5 - camera.cy) / camera.fy
    bottom = (camera.height - 0.5 - camera.cy) / camera.fy
    normals = np.array([
        [1.0, 0.0, -left],
        [-1.0, 0.0, right],
        [0.0, 1.0, -top],
        [0.0, -1.0, bottom],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ])
    offsets = np.array([0.0, 0.0, 0.0, 0.0, -camera.near, camera.far])
    norms = np.linalg.norm(normals, axis=1)
    return normals / norms[:, None], offsets / norms


def cull_visible(anchors: AnchorSet, camera: Camera) -> np.ndarray:
    """Indices of anchors whose center, padded by its largest scale, lies inside the frustum."""
    if len(anchors) == 0:
        return np.zeros(0, dtype=np.int64)
    normals, offsets = frustum_planes(camera)
    pc = camera.to_camera(anchors.centers)
    dist = pc @ normals.T + offsets
    pad = np.max(anchors.scales, axis=1)
    inside = np.all(dist >= -pad[:, None], axis=1)
    return np.nonzero(inside)[0]


# ---------------------------------------------------------------------------
# generation


@dataclass
class GaussianHeads:
    opacity: Mlp
    color: Mlp
    scale: Mlp
    rotation: Mlp
    k: int = K_DEFAULT

    @classmethod
    def create(cls, rng: np.random.Generator, k: int = K_DEFAULT, feature_dim: int = FEATURE_DIM,
               hidden: int = HEAD_HIDDEN) -> "GaussianHeads":
        din = feature_dim + 4
        heads = cls(
            Mlp.create([din, hidden, k], rng),
            Mlp.create([din, hidden, 3 * k], rng),
            Mlp.create([din, hidden, 3 * k], rng),
            Mlp.create([din, hidden, 4 * k], rng),
            k,
        )
        heads.rotation.biases[-1][0::4] = 1.0
        return heads

    def named_parameters(self, prefix="head") -> dict[str, np.ndarray]:
        out = {}
        for name in ("opacity", "color", "scale", "rotation"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


def _view_inputs(centers: np.ndarray, features: np.ndarray, cam_center: np.ndarray):
    rel = centers - cam_center
    dist = np.linalg.norm(rel, axis=1)
    if np.any(dist == 0.0):
        raise DegenerateInputError("anchor coincides with the camera center")
    return np.concatenate([features, dist[:, None], rel / dist[:, None]], axis=1)


def spawn_batch(anchors: AnchorSet, idx: np.ndarray, heads: GaussianHeads, cam_center: np.ndarray):
    """Generate ``k`` Gaussians for each anchor in ``idx``.

    Returns ``(gaussians, backward)``. Gaussians are ordered anchor-major.
    ``backward(g)`` maps a :class:`GaussianBatch` of gradients to a dict with
    full-size ``anchor.features``, ``anchor.scale`` (w.r.t. l_v),
    ``anchor.offsets`` and every head parameter.
    """
    k = heads.k
    idx = np.asarray(idx, dtype=np.int64)
    v = len(idx)
    centers = anchors.centers[idx]
    lv = anchors.scales[idx]
    offs = anchors.offsets[idx]
    x = _view_inputs(centers, anchors.features[idx], np.asarray(cam_center, dtype=np.float64))
    raw_o, back_o = heads.opacity.forward(x)
    raw_c, back_c = heads.color.forward(x)
    raw_s, back_s = heads.scale.forward(x)
    raw_r, back_r = heads.rotation.forward(x)
    opacity = sigmoid(raw_o).reshape(v * k)
    color = sigmoid(raw_c).reshape(v * k, 3)
    lo, hi = RAW_SCALE_RANGE
    rs = raw_s.reshape(v, k, 3)
    inside = (rs > lo) & (rs < hi)
    es = np.exp(np.clip(rs, lo, hi))
    scale = es * lv[:, None, :]
    rot, rot_back = normalize_quaternion(raw_r.reshape(v * k, 4))
    mu = centers[:, None, :] + offs * lv[:, None, :]
    out = GaussianBatch(mu.reshape(v * k, 3), rot, scale.reshape(v * k, 3), color, opacity)

    def backward(g: GaussianBatch):
        g_mu = g.mu.reshape(v, k, 3)
        g_scale = g.scale.reshape(v, k, 3)
        g_off = g_mu * lv[:, None, :]
        g_lv = np.sum(g_mu * offs, axis=1) + np.sum(g_scale * es, axis=1)
        g_rs = np.where(inside, g_scale * scale, 0.0).reshape(v, 3 * k)
        g_ro = (g.opacity * opacity * (1.0 - opacity)).reshape(v, k)
        g_rc = (g.color * color * (1.0 - color)).reshape(v, 3 * k)
        g_rr = rot_back(g.rotation).reshape(v, 4 * k)
        grads = {}
        gx = np.zeros_like(x)
        for name, back, gy in (("opacity", back_o, g_ro), ("color", back_c, g_rc),
                               ("scale", back_s, g_rs), ("rotation", back_r, g_rr)):
            gxi, layer_grads = back(gy)
            gx += gxi
            for i, (gw, gb) in enumerate(layer_grads):
                grads[f"head.{name}.{i}.weight"] = gw
                grads[f"head.{name}.{i}.bias"] = gb
        full_f = np.zeros_like(anchors.features)
        full_f[idx] = gx[:, :anchors.features.shape[1]]
        full_l = np.zeros_like(anchors.log_scales)
        full_l[idx] = g_lv
        full_o = np.zeros_like(anchors.offsets)
        full_o[idx] = g_off
        grads["anchor.features"] = full_f
        grads["anchor.scale"] = full_l
        grads["anchor.offsets"] = full_o
        return grads

    return out, backward


def spawn_gaussians(anchor: Anchor, heads: GaussianHeads, camera: Camera):
    """Single-anchor generation; see :func:`spawn_batch`."""
    single = AnchorSet(anchor.center[None, :], anchor.feature[None, :], np.log(anchor.scale)[None, :],
                       anchor.offsets[None, :, :], np.array([anchor.id]))
    return spawn_batch(single, np.array([0]), heads, camera.center)


# ---------------------------------------------------------------------------
# density control


@dataclass
class DensifyStats:
    grad_accum: np.ndarray  # (V, k) summed 2D position-gradient norms
    grad_count: np.ndarray  # (V, k)
    opacity_sum: np.ndarray  # (V,)
    opacity_count: np.ndarray  # (V,)
    window_start: int = 0

    @classmethod
    def zeros(cls, v: int, k: int, window_start: int = 0) -> "DensifyStats":
        return cls(np.zeros((v, k)), np.zeros((v, k)), np.zeros(v), np.zeros(v), window_start)

    def record(self, anchor_idx: np.ndarray, grad_norms: np.ndarray, rendered: np.ndarray,
               opacities: np.ndarray):
        """Accumulate one render. Inputs are per generated Gaussian, anchor-major (v*k)."""
        k = self.grad_accum.shape[1]
        v = len(anchor_idx)
        gn = grad_norms.reshape(v, k)
        rd = rendered.reshape(v, k)
        self.grad_accum[anchor_idx] += np.where(rd, gn, 0.0)
        self.grad_count[anchor_idx] += rd
        self.opacity_sum[anchor_idx] += opacities.reshape(v, k).mean(axis=1)
        self.opacity_count[anchor_idx] += 1.0

    def empty(self) -> bool:
        return not (np.any(self.grad_count) or np.any(self.opacity_count))


def grow_anchors(anchors: AnchorSet, stats: DensifyStats, voxel: float, tau_g: float):
    """Add an anchor at each empty lattice cell hit by a high-gradient Gaussian.

    Returns ``(new_anchor_set, parent_rows)`` where ``parent_rows`` gives, for each
    appended anchor, the row of the anchor whose Gaussian triggered it.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(stats.grad_count > 0, stats.grad_accum / np.maximum(stats.grad_count, 1), 0.0)
    hot = mean > tau_g
    if not np.any(hot):
        return anchors, np.zeros(0, dtype=np.int64)
    pos = anchors.canonical_positions()
    rows, slots = np.nonzero(hot)
    keys = _lattice_keys(pos[rows, slots], voxel)
    occupied = {tuple(kk) for kk in _lattice_keys(anchors.centers, voxel)}
    chosen: dict[tuple, int] = {}
    for key, parent in zip(map(tuple, keys), rows):
        if key in occupied or key in chosen:
            continue
        chosen[key] = int(parent)
    if not chosen:
        return anchors, np.zeros(0, dtype=np.int64)
    new_keys = sorted(chosen)
    parents = np.array([chosen[kk] for kk in new_keys], dtype=np.int64)
    n_new = len(new_keys)
    centers = np.array(new_keys, dtype=np.int64) * voxel + 0.0
    grown = AnchorSet(
        np.concatenate([anchors.centers, centers]),
        np.concatenate([anchors.features, anchors.features[parents]]),
        np.concatenate([anchors.log_scales, np.full((n_new, 3), np.log(voxel))]),
        np.concatenate([anchors.offsets, np.zeros((n_new, anchors.k, 3))]),
        np.concatenate([anchors.ids, anchors.next_id + np.arange(n_new, dtype=np.int64)]),
        anchors.next_id + n_new,
    )
    return grown, parents


def prune_anchors(anchors: AnchorSet, stats: DensifyStats, tau_alpha: float):
    """Drop anchors whose mean decoded opacity over the window is below ``tau_alpha``.

    Anchors never observed in the window are kept. Returns ``(survivors, keep_mask)``.
    """
    observed = stats.opacity_count > 0
    mean = np.where(observed, stats.opacity_sum / np.maximum(stats.opacity_count, 1), np.inf)
    keep = ~(observed & (mean < tau_alpha))
    return anchors.subset(keep), keep
