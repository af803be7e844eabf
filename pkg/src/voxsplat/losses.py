"""Training losses and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.2
    tv: float = 0.0002
    vol: float = 0.015

    def __post_init__(self):
        for name in ("ssim", "tv", "vol"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"loss weight {name} must be finite and >= 0")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filt(x, k):
    """Separable 'valid' correlation over the first two axes."""
    y = sliding_window_view(x, len(k), axis=0) @ k
    y = np.moveaxis(sliding_window_view(y, len(k), axis=1), -1, 0)
    return np.tensordot(k, y, axes=(0, 0))


def _filt_adjoint(g, k):
    pad = len(k) - 1
    gp = np.pad(g, [(pad, pad), (pad, pad)] + [(0, 0)] * (g.ndim - 2))
    return _filt(gp, k[::-1])


def _ssim_parts(x, y, k):
    mx, my = _filt(x, k), _filt(y, k)
    exx, eyy, exy = _filt(x * x, k), _filt(y * y, k), _filt(x * y, k)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    return mx, my, vx, vy, cxy


def ssim(rendered, target, with_grad=False):
    """Mean SSIM over the valid region (11x11 Gaussian window, sigma 1.5, data range 1).

    Images smaller than the window use the largest odd window that fits.
    With ``with_grad`` returns ``(value, d value / d rendered)``.
    """
    x, y = _check_pair(rendered, target)
    size = min(SSIM_WINDOW, *x.shape[:2])
    if size < 1:
        raise DomainError("empty image")
    k = gaussian_kernel(size - (1 - size % 2))
    mx, my, vx, vy, cxy = _ssim_parts(x, y, k)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(np.mean(smap))
    if not with_grad:
        return value
    gm = 1.0 / smap.size
    d_mx = (2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * smap * (1.0 / b1 - 1.0 / b2)) * gm
    d_exx = -smap / b2 * gm
    d_exy = 2 * a1 / (b1 * b2) * gm
    grad = _filt_adjoint(d_mx, k) + 2 * x * _filt_adjoint(d_exx, k) + y * _filt_adjoint(d_exy, k)
    return value, grad


def color_loss(rendered, target, lambda_ssim: float = 0.2):
    """L1 + lambda_ssim * (1 - SSIM). Returns ``(loss, grad_rendered, parts)``."""
    x, y = _check_pair(rendered, target)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    g = np.sign(diff) / diff.size
    s, gs = ssim(x, y, with_grad=True)
    loss = l1 + lambda_ssim * (1.0 - s)
    return loss, g - lambda_ssim * gs, {"l1": l1, "ssim": s}


def volume_regularization(scales):
    """Sum of per-Gaussian scale products. Returns ``(value, d value / d scales)``."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    value = float(np.sum(np.prod(s, axis=1)))
    grad = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=1)
    return value, grad


def total_loss(color: float, tv: float, vol: float, weights: LossWeights) -> float:
    """Weighted sum of the already-evaluated loss components."""
    return color + weights.tv * tv + weights.vol * vol


def mse(rendered, target) -> float:
    x, y = _check_pair(rendered, target)
    return float(np.mean((x - y) ** 2))


def psnr(rendered, target) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; exact matches return 100 dB."""
    m = mse(rendered, target)
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def _downsample(img):
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        img = np.pad(img, [(0, h % 2), (0, w % 2)] + [(0, 0)] * (img.ndim - 2), mode="symmetric")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim_scales(shape) -> int:
    side = min(shape[:2])
    n = 0
    while side >= SSIM_WINDOW and n < len(MS_SSIM_WEIGHTS):
        n += 1
        side = (side + 1) // 2
    return n


def ms_ssim(rendered, target) -> float:
    """Multi-scale SSIM, computed per channel and averaged.

    Uses as many of the five standard scales as fit the 11x11 window; the
    weights of the usable scales are renormalized to sum to one.
    """
    x, y = _check_pair(rendered, target)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    n = ms_ssim_scales(x.shape)
    if n == 0:
        raise DomainError("image too small for a single MS-SSIM scale")
    w = np.array(MS_SSIM_WEIGHTS[:n])
    w = w / w.sum()
    k = gaussian_kernel()
    per_scale = []
    for level in range(n):
        mx, my, vx, vy, cxy = _ssim_parts(x, y, k)
        cs = (2 * cxy + SSIM_C2) / (vx + vy + SSIM_C2)
        if level == n - 1:
            lum = (2 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
            per_scale.append(np.mean(lum * cs, axis=(0, 1)))
        else:
            per_scale.append(np.mean(cs, axis=(0, 1)))
            x, y = _downsample(x), _downsample(y)
    vals = np.maximum(np.stack(per_scale), 0.0)  # (n, C)
    return float(np.mean(np.prod(vals ** w[:, None], axis=0)))
