"""Projection of 3D Gaussians and front-to-back alpha compositing.

Pixel ``(row v, column u)`` has its center at image coordinates ``(u, v)``.
Cameras follow the OpenCV convention: +z forward, +y down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

TILE = 16
COV_FLOOR = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    timestamp: float = 0.0
    near: float = 0.01
    far: float = 100.0
    # camera-to-world matrix this camera was parsed from, kept so files round-trip exactly
    source_c2w: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ContractError("need 0 < near < far")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, width, height, fx, fy=None, up=(0.0, -1.0, 0.0),
                timestamp=0.0, near=0.01, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(fx, fy if fy is not None else fx, (width - 1) / 2.0, (height - 1) / 2.0,
                   width, height, rot, -rot @ eye, timestamp, near, far)

    def with_time(self, timestamp: float) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.rotation.copy(), self.translation.copy(), timestamp, self.near, self.far,
                      self.source_c2w)


@dataclass
class Splats:
    """Projected 2D Gaussians (structure of arrays)."""

    means: np.ndarray  # (n, 2) pixels
    covs: np.ndarray  # (n, 2, 2) pixels^2
    depths: np.ndarray  # (n,)
    colors: np.ndarray  # (n, 3)
    opacities: np.ndarray  # (n,)
    source: np.ndarray  # (n,) int index of originating Gaussian

    def __len__(self):
        return len(self.depths)

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) accumulated
    final_transmittance: np.ndarray
    splats: Splats
    background: np.ndarray
    tile_lists: list = field(default_factory=list)  # (ty, tx, sorted splat indices)
    skipped_singular: int = 0
    tile_cache: list = field(default_factory=list, repr=False)  # per-tile forward buffers


# ---------------------------------------------------------------------------
# projection


def project_gaussians(mu: np.ndarray, sigma: np.ndarray, camera: Camera):
    """EWA projection of a batch of Gaussians.

    Returns ``(means2d, covs2d, depths, keep, backward)``; ``keep`` masks
    Gaussians with near < depth < far. ``backward(g_mean, g_cov)`` takes
    gradients for the kept rows only and returns ``(g_mu, g_sigma)`` for all.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 3, 3)
    w = camera.rotation
    pc = camera.to_camera(mu)
    keep = (pc[:, 2] > camera.near) & (pc[:, 2] < camera.far)
    x, y, z = pc[keep, 0], pc[keep, 1], pc[keep, 2]
    fx, fy = camera.fx, camera.fy
    means = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)
    n = len(z)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z ** 2
    t = jac @ w
    sk = sigma[keep]
    covs = t @ sk @ np.swapaxes(t, 1, 2)
    covs[:, 0, 0] += COV_FLOOR
    covs[:, 1, 1] += COV_FLOOR

    def backward(g_mean, g_cov):
        g_mean = np.asarray(g_mean, dtype=np.float64).reshape(n, 2)
        g_cov = np.asarray(g_cov, dtype=np.float64).reshape(n, 2, 2)
        g_sigma_k = np.swapaxes(t, 1, 2) @ g_cov @ t
        g_t = (g_cov + np.swapaxes(g_cov, 1, 2)) @ t @ sk
        g_j = g_t @ w.T
        gx = g_mean[:, 0] * fx / z - g_j[:, 0, 2] * fx / z ** 2
        gy = g_mean[:, 1] * fy / z - g_j[:, 1, 2] * fy / z ** 2
        gz = (-g_mean[:, 0] * fx * x / z ** 2 - g_mean[:, 1] * fy * y / z ** 2
              - g_j[:, 0, 0] * fx / z ** 2 - g_j[:, 1, 1] * fy / z ** 2
              + g_j[:, 0, 2] * 2 * fx * x / z ** 3 + g_j[:, 1, 2] * 2 * fy * y / z ** 3)
        g_pc = np.stack([gx, gy, gz], axis=1)
        g_mu = np.zeros_like(mu)
        g_mu[keep] = g_pc @ w
        g_sigma = np.zeros_like(sigma)
        g_sigma[keep] = g_sigma_k
        return g_mu, g_sigma

    return means, covs, pc[keep, 2], keep, backward


def project_gaussian(mu, sigma, camera: Camera):
    """Project one Gaussian. Returns ``(mean2d, cov2d, depth)`` or ``None`` if culled."""
    means, covs, depths, keep, _ = project_gaussians(mu, sigma, camera)
    if not keep[0]:
        return None
    return means[0], covs[0], depths[0]


# ---------------------------------------------------------------------------
# rasterization


def _conics(covs: np.ndarray):
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] * covs[:, 1, 0]
    ok = det > 0.0
    conic = np.zeros_like(covs)
    d = np.where(ok, det, 1.0)
    conic[:, 0, 0] = covs[:, 1, 1] / d
    conic[:, 1, 1] = covs[:, 0, 0] / d
    conic[:, 0, 1] = -covs[:, 0, 1] / d
    conic[:, 1, 0] = -covs[:, 1, 0] / d
    return conic, ok


def _extent(covs: np.ndarray, opacities: np.ndarray) -> np.ndarray:
    """Screen radius beyond which alpha is guaranteed below ALPHA_MIN (never below 3 sigma)."""
    a, c = covs[:, 0, 0], covs[:, 1, 1]
    b = 0.5 * (covs[:, 0, 1] + covs[:, 1, 0])
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    ratio = np.maximum(np.minimum(opacities, ALPHA_MAX) / ALPHA_MIN, 1.0)
    k = np.maximum(3.0, np.sqrt(2.0 * np.log(ratio)))
    return k * np.sqrt(lam) + 1.0


def _tile_assignment(splats: Splats, width: int, height: int, ok: np.ndarray):
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    r = _extent(splats.covs, splats.opacities)
    mx, my = splats.means[:, 0], splats.means[:, 1]
    tx0 = np.floor((mx - r) / TILE)
    tx1 = np.floor((mx + r) / TILE)
    ty0 = np.floor((my - r) / TILE)
    ty1 = np.floor((my + r) / TILE)
    order = np.lexsort((np.arange(len(splats)), splats.depths))
    tiles = []
    for ty in range(nty):
        for tx in range(ntx):
            hit = ok & (tx0 <= tx) & (tx1 >= tx) & (ty0 <= ty) & (ty1 >= ty)
            idx = order[hit[order]]
            tiles.append((ty, tx, idx))
    return tiles


def _tile_pixels(ty, tx, width, height):
    ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
    xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


CHUNK = 64


def _tile_forward(splats: Splats, conic, idx, py, px):
    """Composite a tile's sorted splats in depth chunks, stopping once every pixel is saturated.

    Returns ``(used, dx, dy, gauss, alpha, capped, trans)`` where ``used`` is the prefix of
    ``idx`` that was evaluated; later splats cannot contribute to any pixel of the tile.
    """
    parts = []
    t_prev = np.ones(len(py))
    for start in range(0, len(idx), CHUNK):
        sub = idx[start:start + CHUNK]
        dx = px[:, None] - splats.means[sub, 0][None, :]
        dy = py[:, None] - splats.means[sub, 1][None, :]
        q = conic[sub]
        power = -0.5 * (q[:, 0, 0] * dx * dx + (q[:, 0, 1] + q[:, 1, 0]) * dx * dy + q[:, 1, 1] * dy * dy)
        gauss = np.exp(np.minimum(power, 0.0))
        raw = splats.opacities[sub][None, :] * gauss
        capped = raw > ALPHA_MAX
        alpha = np.minimum(raw, ALPHA_MAX)
        alpha = np.where(alpha < ALPHA_MIN, 0.0, alpha)
        # prepending the carried transmittance keeps the product strictly sequential
        running = np.cumprod(np.concatenate([t_prev[:, None], 1.0 - alpha], axis=1), axis=1)
        trans = running[:, :-1]
        alpha = np.where(trans >= T_MIN, alpha, 0.0)
        parts.append((dx, dy, gauss, alpha, capped, trans))
        t_prev = running[:, -1]
        if np.all(t_prev < T_MIN):
            break
    used = idx[:min(len(idx), len(parts) * CHUNK)]
    cols = [np.concatenate(arrs, axis=1) for arrs in zip(*parts)]
    return (used, *cols)


def rasterize(splats: Splats, height: int, width: int, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Tile-based front-to-back alpha compositing.

    Splats are binned to 16x16 tiles, sorted by (depth, index) and composited
    per pixel; alpha below 1/255 is skipped and a pixel stops accumulating
    once its transmittance falls under 1e-4.
    """
    bg = np.asarray(background, dtype=np.float64)
    for arr in (splats.means, splats.covs, splats.colors, splats.opacities, splats.depths):
        if not np.all(np.isfinite(arr)):
            raise ContractError("non-finite splat attribute")
    image = np.empty((height, width, 3))
    final_t = np.ones((height, width))
    conic, ok = _conics(splats.covs)
    tiles = _tile_assignment(splats, width, height, ok)
    cache = []
    for ty, tx, idx in tiles:
        py, px = _tile_pixels(ty, tx, width, height)
        if len(idx) == 0:
            image[py, px] = bg
            cache.append(None)
            continue
        fwd = _tile_forward(splats, conic, idx, py, px)
        used, alpha, trans = fwd[0], fwd[4], fwd[6]
        weight = alpha * trans
        color = weight @ splats.colors[used]
        tfin = np.prod(1.0 - alpha, axis=1)
        image[py, px] = color + bg[None, :] * tfin[:, None]
        final_t[py, px] = tfin
        cache.append(fwd)
    return RenderOutput(image, 1.0 - final_t, final_t, splats, bg, tiles, int(np.sum(~ok)), cache)


def rasterize_backward(output: RenderOutput, grad_image: np.ndarray):
    """Exact reverse of :func:`rasterize`.

    Returns a dict with gradients for ``means`` (n, 2), ``covs`` (n, 2, 2),
    ``colors`` (n, 3) and ``opacities`` (n,). Covariance gradients are with
    respect to each matrix entry taken independently.
    """
    if output is None or output.splats is None or (len(output.splats) and not output.tile_lists):
        raise ContractError("render output lacks the buffers needed for backward")
    splats = output.splats
    n = len(splats)
    height, width = output.image.shape[:2]
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != output.image.shape:
        raise ContractError("gradient shape does not match the image")
    g_means = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_colors = np.zeros((n, 3))
    g_opac = np.zeros(n)
    conic, _ = _conics(splats.covs)
    bg = output.background
    cache = output.tile_cache or [None] * len(output.tile_lists)
    for (ty, tx, idx), fwd in zip(output.tile_lists, cache):
        if len(idx) == 0:
            continue
        py, px = _tile_pixels(ty, tx, width, height)
        if fwd is None:
            fwd = _tile_forward(splats, conic, idx, py, px)
        idx, dx, dy, gauss, alpha, capped, trans = fwd
        g = grad_image[py, px]
        m = len(idx)
        weight = alpha * trans
        g_colors_t = weight.T @ g
        cg = g @ splats.colors[idx].T  # (P, m): c_i . g_p
        contrib = weight * cg
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        tfin = output.final_transmittance[py, px]
        bgg = (g @ bg) * tfin
        # only entries that blended, and were not clamped at the cap, carry alpha gradients
        r, c = np.nonzero((alpha > 0.0) & ~capped)
        a_rc = alpha[r, c]
        g_alpha = trans[r, c] * cg[r, c] - (suffix[r, c] + bgg[r]) / (1.0 - a_rc)
        g_opac_t = np.bincount(c, g_alpha * gauss[r, c], minlength=m)
        g_power = g_alpha * a_rc
        ex, ey = dx[r, c], dy[r, c]
        q = conic[idx]
        qa, qb, qd = q[c, 0, 0], 0.5 * (q[c, 0, 1] + q[c, 1, 0]), q[c, 1, 1]
        g_mx = np.bincount(c, g_power * (qa * ex + qb * ey), minlength=m)
        g_my = np.bincount(c, g_power * (qb * ex + qd * ey), minlength=m)
        gq = np.empty((m, 2, 2))
        gq[:, 0, 0] = -0.5 * np.bincount(c, g_power * ex * ex, minlength=m)
        gq[:, 0, 1] = gq[:, 1, 0] = -0.5 * np.bincount(c, g_power * ex * ey, minlength=m)
        gq[:, 1, 1] = -0.5 * np.bincount(c, g_power * ey * ey, minlength=m)
        # indices are unique within a tile
        g_colors[idx] += g_colors_t
        g_opac[idx] += g_opac_t
        g_means[idx, 0] += g_mx
        g_means[idx, 1] += g_my
        g_conic[idx] += gq
    # d conic = -conic dSigma conic  =>  dL/dSigma = -conic^T G conic^T
    ct = np.swapaxes(conic, 1, 2)
    g_covs = -ct @ g_conic @ ct
    return {"means": g_means, "covs": g_covs, "colors": g_colors, "opacities": g_opac}


def rasterize_reference(splats: Splats, height: int, width: int, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Untiled compositing oracle: one global depth sort, sequential blending per pixel."""
    bg = np.asarray(background, dtype=np.float64)
    py, px = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    py, px = py.ravel().astype(np.float64), px.ravel().astype(np.float64)
    color = np.zeros((py.size, 3))
    trans = np.ones(py.size)
    done = np.zeros(py.size, dtype=bool)
    order = sorted(range(len(splats)), key=lambda i: (splats.depths[i], i))
    for i in order:
        cov = splats.covs[i]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        if det <= 0.0:
            continue
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
        dx = px - splats.means[i, 0]
        dy = py - splats.means[i, 1]
        power = -0.5 * (inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy)
        a = np.minimum(splats.opacities[i] * np.exp(np.minimum(power, 0.0)), ALPHA_MAX)
        use = (a >= ALPHA_MIN) & ~done
        color[use] += splats.colors[i][None, :] * (a[use] * trans[use])[:, None]
        trans[use] = trans[use] * (1.0 - a[use])
        done |= trans < T_MIN
    color += bg[None, :] * trans[:, None]
    return color.reshape(height, width, 3)
