"""Dense math substrate: quaternions, covariances, a small MLP, Adam and LR schedules.

Everything here works on float64 numpy arrays and carries explicit backward
functions; nothing relies on an autodiff framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


# ---------------------------------------------------------------------------
# quaternions


def normalize_quaternion(q: np.ndarray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Normalize quaternions along the last axis. Returns (unit q, backward)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateInputError("all-zero quaternion cannot be normalized")
    n = q / norm

    def backward(g: np.ndarray) -> np.ndarray:
        return (g - n * np.sum(n * g, axis=-1, keepdims=True)) / norm

    return n, backward


def _rotation_from_unit(n: np.ndarray) -> np.ndarray:
    w, x, y, z = n[..., 0], n[..., 1], n[..., 2], n[..., 3]
    r = np.empty(n.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotation_unit_backward(n: np.ndarray, gr: np.ndarray) -> np.ndarray:
    w, x, y, z = n[..., 0], n[..., 1], n[..., 2], n[..., 3]
    g = gr
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion, normalized first.

    Accepts a single quaternion or a batch ``(..., 4)``.
    """
    n, _ = normalize_quaternion(q)
    return _rotation_from_unit(n)


def quaternion_to_rotation_vjp(q) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    n, norm_back = normalize_quaternion(q)
    r = _rotation_from_unit(n)

    def backward(gr: np.ndarray) -> np.ndarray:
        return norm_back(_rotation_unit_backward(n, gr))

    return r, backward


# ---------------------------------------------------------------------------
# covariance


def covariance_from_scale_rotation(s, q) -> np.ndarray:
    """Sigma = R S S^T R^T for scales ``s`` and quaternion ``q`` (batched or single)."""
    return covariance_vjp(s, q)[0]


def covariance_vjp(s, q):
    """Covariance plus a backward mapping dL/dSigma to (dL/ds, dL/dq)."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise DomainError("scales must be strictly positive")
    r, rot_back = quaternion_to_rotation_vjp(q)
    m = r * s[..., None, :]
    sigma = m @ np.swapaxes(m, -1, -2)

    def backward(g: np.ndarray):
        gm = (g + np.swapaxes(g, -1, -2)) @ m
        gs = np.sum(gm * r, axis=-2)
        gq = rot_back(gm * s[..., None, :])
        return gs, gq

    return sigma, backward


# ---------------------------------------------------------------------------
# MLP

_ACTIVATIONS = ("relu", "linear")


@dataclass
class Mlp:
    """Fully connected network; weights are ``(out, in)``, inputs are row batches."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ContractError("layer lists differ in length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
            if b.shape != (w.shape[0],):
                raise ContractError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractError(f"layer {i}: input dim does not chain")

    @classmethod
    def create(cls, dims: list[int], rng: np.random.Generator, hidden="relu",
               out="linear", zero_last=False) -> "Mlp":
        weights, biases, acts = [], [], []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and zero_last:
                w = np.zeros((dout, din))
            else:
                bound = 1.0 / math.sqrt(din)
                w = rng.uniform(-bound, bound, size=(dout, din))
            weights.append(w)
            biases.append(np.zeros(dout))
            acts.append(out if last else hidden)
        return cls(weights, biases, acts)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def forward(self, x):
        return mlp_forward_backward(self, x)


def mlp_forward_backward(net: Mlp, x):
    """Run ``net`` on ``x`` (a vector or a batch of rows).

    Returns ``(y, backward)`` where ``backward(gy)`` gives
    ``(gx, [(gW, gb), ...])`` by the chain rule.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != net.input_dim:
        raise ContractError(f"input dim {h.shape[-1]} != {net.input_dim}")
    for w, b in zip(net.weights, net.biases):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError("non-finite MLP parameter")
    inputs, pre = [], []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    y = h[0] if single else h

    def backward(gy):
        g = np.asarray(gy, dtype=np.float64)
        g = g[None, :] if single else g
        grads = [None] * len(net.weights)
        for i in range(len(net.weights) - 1, -1, -1):
            if net.activations[i] == "relu":
                g = g * (pre[i] > 0.0)
            grads[i] = (g.T @ inputs[i], g.sum(axis=0))
            g = g @ net.weights[i]
        return (g[0] if single else g), grads

    return y, backward


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Pure: returns ``(new_params, new_state)``."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ContractError(
            f"adam shapes differ: params {params.shape}, grads {grads.shape}, m {state.m.shape}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    final: float
    max_steps: int

    def __post_init__(self):
        if self.initial <= 0 or self.final <= 0 or self.max_steps <= 0:
            raise DomainError("schedule needs positive initial, final and max_steps")

    def __call__(self, step: int) -> float:
        return lr_value(self, step)


def lr_value(schedule: LrSchedule, step: int) -> float:
    """Log-linear interpolation from ``initial`` to ``final``, held after ``max_steps``."""
    if step <= 0:
        return schedule.initial
    if step >= schedule.max_steps:
        return schedule.final
    frac = step / schedule.max_steps
    return math.exp((1.0 - frac) * math.log(schedule.initial) + frac * math.log(schedule.final))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))
