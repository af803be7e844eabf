"""CSV tables and matplotlib figures for training and evaluation reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_csv(rows: list[dict], path, fields=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _stage_bounds(ax, steps, stages):
    for i in range(1, len(stages)):
        if stages[i] != stages[i - 1]:
            ax.axvline(steps[i], color="0.6", lw=0.8, ls="--")


def plot_training(rows: list[dict], path) -> Path:
    """Loss, per-view PSNR and anchor count against step, with stage boundaries marked."""
    steps = np.array([r["step"] for r in rows])
    stages = [r["stage"] for r in rows]
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    axes[0].semilogy(steps, [r["loss"] for r in rows], lw=0.8)
    axes[0].set_ylabel("loss")
    ps = np.array([r["psnr"] for r in rows])
    axes[1].plot(steps, ps, lw=0.5, alpha=0.5, label="view")
    if len(ps) >= 20:
        w = 20
        axes[1].plot(steps[w - 1:], np.convolve(ps, np.ones(w) / w, mode="valid"), lw=1.2, label="20-step mean")
    flagged = [r["step"] for r in rows if r.get("flag_quality") or r.get("flag_gradient")]
    if flagged:
        axes[1].plot(flagged, [ps[list(steps).index(s)] for s in flagged], "r.", ms=2, label="flagged")
    axes[1].set_ylabel("PSNR (dB)")
    axes[1].legend(loc="lower right", fontsize=8)
    axes[2].plot(steps, [r["anchors"] for r in rows], lw=1.0)
    axes[2].set_ylabel("anchors")
    axes[2].set_xlabel("step")
    for ax in axes:
        _stage_bounds(ax, steps, stages)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_evaluation(rows: list[dict], path) -> Path:
    """Per-frame PSNR grouped by camera, against normalized time."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for cid in sorted({r["camera"] for r in rows}):
        sel = [r for r in rows if r["camera"] == cid]
        ax.plot([r["time"] for r in sel], [r["psnr"] for r in sel], "o-", ms=3, label=f"camera {cid}")
    ax.set_xlabel("time")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
