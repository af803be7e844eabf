"""Three-stage optimization: coarse static fit, temporal training with crude-view
detection, and focused refinement of the flagged views."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .anchors import DensifyStats, grow_anchors, prune_anchors
from .core_math import AdamState, LrSchedule, adam_step, lr_value
from .dataset import Dataset, Frame
from .errors import DomainError, NumericError
from .hexplane import tv_loss
from .losses import LossWeights, color_loss, psnr, total_loss, volume_regularization
from .model import NeuralVoxelModel

log = logging.getLogger(__name__)

# initial -> final learning rate per parameter group
DEFAULT_LR = {
    "offset": (0.01, 1e-5),
    "feature": (0.0075, 5e-5),
    "anchor_scale": (0.007, 7e-5),
    "opacity": (0.002, 2e-6),
    "color": (0.008, 5e-7),
    "covariance": (0.004, 4e-6),
    "grid": (0.0016, 1.6e-4),
    "decoder": (0.00016, 1.6e-5),
}

_GROUP_PREFIXES = (
    ("anchor.offsets", "offset"),
    ("anchor.features", "feature"),
    ("anchor.log_scales", "anchor_scale"),
    ("head.opacity", "opacity"),
    ("head.color", "color"),
    ("head.scale", "covariance"),
    ("head.rotation", "covariance"),
    ("field.", "grid"),
    ("deform.", "decoder"),
)

STATIC_GROUPS = {"offset", "feature", "anchor_scale", "opacity", "color", "covariance"}


def param_group(name: str) -> str:
    for prefix, group in _GROUP_PREFIXES:
        if name.startswith(prefix):
            return group
    raise KeyError(name)


class NonFiniteLossError(NumericError):
    def __init__(self, stage: int, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at stage {stage}, iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class TrainConfig:
    stage1_iterations: int = 3000
    stage2_iterations: int = 14000
    stage3_iterations: int = 14000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    lr_decay_steps: int = 14000
    tau_g: float = 0.0002
    tau_g_refine: float = 0.0001
    tau_alpha: float = 0.05
    tau_alpha_refine: float = 0.03
    lambda_ssim: float = 0.2
    lambda_tv: float = 0.0002
    lambda_vol: float = 0.015
    gamma_start: float = 0.05
    gamma_end: float = 0.02
    ema_momentum: float = 0.4
    densify_start: int = 500
    densify_interval: int = 100
    grow_until: int = 12000
    flag_warmup: int = 500
    seed: int = 0
    voxel_size: float = 0.1
    k: int = 10
    feature_dim: int = 32
    field_resolution: tuple = (64, 64, 64, 25)
    field_multipliers: tuple = (1, 2)
    field_features: int = 16
    decoder_hidden: int = 64
    offset_init: float = 0.5

    def __post_init__(self):
        self.lr = {k: tuple(float(x) for x in v) for k, v in {**DEFAULT_LR, **self.lr}.items()}
        self.field_resolution = tuple(int(x) for x in self.field_resolution)
        self.field_multipliers = tuple(int(x) for x in self.field_multipliers)
        for name, (a, b) in self.lr.items():
            if not (a > 0 and b > 0):
                raise DomainError(f"learning rates for {name} must be positive")
        for n in (self.stage1_iterations, self.stage2_iterations, self.stage3_iterations):
            if n <= 0:
                raise DomainError("stage iteration counts must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DomainError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr"] = {k: list(v) for k, v in sorted(self.lr.items())}
        d["field_resolution"] = list(self.field_resolution)
        d["field_multipliers"] = list(self.field_multipliers)
        return d

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_tv, self.lambda_vol)

    def stage_iterations(self, stage: int) -> int:
        return (self.stage1_iterations, self.stage2_iterations, self.stage3_iterations)[stage - 1]

    def thresholds(self, stage: int) -> tuple[float, float]:
        if stage == 3:
            return self.tau_g_refine, self.tau_alpha_refine
        return self.tau_g, self.tau_alpha


def scaled_config(stage1=300, stage2=1400, stage3=1400, **overrides) -> TrainConfig:
    """Full-length defaults with every iteration-based quantity shrunk to a short schedule."""
    ratio = stage2 / 14000
    base = dict(
        stage1_iterations=stage1, stage2_iterations=stage2, stage3_iterations=stage3,
        lr_decay_steps=stage2,
        densify_start=max(1, round(500 * ratio)), densify_interval=max(1, round(100 * ratio)),
        grow_until=round(12000 * ratio), flag_warmup=round(500 * ratio),
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedules


def densify_schedule_active(iteration: int, start: int = 500, interval: int = 100,
                            grow_until: int = 12000) -> tuple[bool, bool]:
    on = iteration >= start and iteration % interval == 0
    return on and iteration <= grow_until, on


def gamma_value(step: int, stage2_len: int, start: float = 0.05, end: float = 0.02) -> float:
    if step >= stage2_len:
        return end
    frac = max(step, 0) / stage2_len
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# crude-view detection


@dataclass
class EmaTracker:
    value: float = 0.0
    initialized: bool = False
    momentum: float = 0.4

    def updated(self, x: float) -> "EmaTracker":
        if not self.initialized:
            return EmaTracker(float(x), True, self.momentum)
        return EmaTracker(self.momentum * x + (1.0 - self.momentum) * self.value, True, self.momentum)


def detect_crude_psnr(tracker: EmaTracker, psnr_i: float, gamma: float):
    """Flag a view whose PSNR is below (1 + gamma) times the pre-update EMA."""
    flagged = tracker.initialized and psnr_i < (1.0 + gamma) * tracker.value
    return flagged, tracker.updated(psnr_i)


def detect_crude_gradient(tracker: EmaTracker, grad_norm: float, gamma: float):
    """Flag a view whose viewspace gradient norm exceeds (1 + gamma) times the EMA."""
    flagged = tracker.initialized and grad_norm > (1.0 + gamma) * tracker.value
    return flagged, tracker.updated(grad_norm)


@dataclass
class RefinementEntry:
    camera_id: int
    failure_type: str
    severity: float
    hits: int = 1
    iteration: int = 0

    @property
    def priority(self) -> float:
        return self.severity * self.hits


def update_refinement_stack(stack: dict, camera_id: int, failure_type: str, deficit: float,
                            iteration: int = 0) -> dict:
    if failure_type not in ("quality", "gradient"):
        raise DomainError(f"unknown failure type {failure_type!r}")
    deficit = max(float(deficit), 0.0)
    entry = stack.get(camera_id)
    if entry is None:
        stack[camera_id] = RefinementEntry(camera_id, failure_type, deficit, 1, iteration)
    else:
        if deficit >= entry.severity:
            entry.failure_type = failure_type
        entry.severity = max(entry.severity, deficit)
        entry.hits += 1
        entry.iteration = iteration
    return stack


def ranked(stack: dict) -> list[RefinementEntry]:
    return sorted(stack.values(), key=lambda e: (-e.priority, e.camera_id))


def sample_refinement_camera(stack: dict, rng: np.random.Generator) -> int:
    entries = sorted(stack.values(), key=lambda e: e.camera_id)
    weights = np.array([e.priority for e in entries], dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones(len(entries))
    return entries[int(rng.choice(len(entries), p=weights / weights.sum()))].camera_id


# ---------------------------------------------------------------------------
# trainer


METRIC_FIELDS = ("step", "stage", "iteration", "camera", "time", "loss", "l1", "ssim", "tv", "vol",
                 "psnr", "anchors", "gaussians", "grad_norm", "flag_quality", "flag_gradient")


class Trainer:
    """Owns the model, optimizer state, density statistics, detectors and the stage cursor."""

    def __init__(self, dataset: Dataset | None, config: TrainConfig, model: NeuralVoxelModel | None = None,
                 rng: np.random.Generator | None = None):
        self.dataset = dataset
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        if model is None:
            model = NeuralVoxelModel.initialize(
                dataset.points, dataset.bbox_min, dataset.bbox_max, config.voxel_size, self.rng,
                reference_center=dataset.mean_camera_center(), background=dataset.background,
                k=config.k, feature_dim=config.feature_dim, field_resolution=config.field_resolution,
                field_multipliers=config.field_multipliers, field_features=config.field_features,
                decoder_hidden=config.decoder_hidden, offset_init=config.offset_init)
        self.model = model
        self.adam: dict[str, AdamState] = {}
        self.stats = DensifyStats.zeros(len(model.anchors), model.anchors.k)
        self.psnr_tracker = EmaTracker(momentum=config.ema_momentum)
        self.grad_tracker = EmaTracker(momentum=config.ema_momentum)
        self.stack: dict[int, RefinementEntry] = {}
        self.stage = 1
        self.iteration = 0
        self.step = 0
        self.detector_calls = 0
        self.metrics: list[dict] = []
        self.refinement_report: dict | None = None
        # replaces the measured (psnr, grad_norm) fed to the detectors; used to replay scripted streams
        self.scripted_metrics: Callable | None = None

    # -- optimizer --------------------------------------------------------

    def learning_rate(self, group: str) -> float:
        initial, final = self.config.lr[group]
        if self.stage == 1:
            return initial
        if self.stage == 3:
            return final
        return lr_value(LrSchedule(initial, final, self.config.lr_decay_steps), self.iteration)

    def apply_gradients(self, grads: dict[str, np.ndarray], active: set[str] | None = None):
        params = self.model.parameters()
        for name in sorted(grads):
            group = param_group(name)
            if active is not None and group not in active:
                continue
            p = params[name]
            state = self.adam.get(name) or AdamState.zeros_like(p)
            new, state = adam_step(p, grads[name], state, self.learning_rate(group))
            p[...] = new
            self.adam[name] = state

    def _remap_anchor_state(self, keep: np.ndarray | None = None, n_new: int = 0):
        for name in ("anchor.features", "anchor.log_scales", "anchor.offsets"):
            st = self.adam.get(name)
            if st is None:
                continue
            m, v = st.m, st.v
            if keep is not None:
                m, v = m[keep], v[keep]
            if n_new:
                pad = np.zeros((n_new,) + m.shape[1:])
                m, v = np.concatenate([m, pad]), np.concatenate([v, pad])
            self.adam[name] = AdamState(m, v, st.t, st.beta1, st.beta2, st.eps)

    # -- density control --------------------------------------------------

    def densify(self, grow: bool, prune: bool):
        tau_g, tau_alpha = self.config.thresholds(self.stage)
        anchors = self.model.anchors
        if grow:
            anchors, parents = grow_anchors(anchors, self.stats, self.model.voxel_size, tau_g)
            if len(parents):
                self._remap_anchor_state(n_new=len(parents))
        if prune:
            old_stats = self.stats
            if len(anchors) > len(old_stats.opacity_count):
                extra = len(anchors) - len(old_stats.opacity_count)
                old_stats = DensifyStats(old_stats.grad_accum, old_stats.grad_count,
                                         np.concatenate([old_stats.opacity_sum, np.zeros(extra)]),
                                         np.concatenate([old_stats.opacity_count, np.zeros(extra)]))
            survivors, keep = prune_anchors(anchors, old_stats, tau_alpha)
            if len(survivors) == 0:
                log.warning("pruning would remove every anchor; skipped")
            elif not np.all(keep):
                anchors = survivors
                self._remap_anchor_state(keep=keep)
        self.model.anchors = anchors
        self.stats = DensifyStats.zeros(len(anchors), anchors.k, self.iteration)

    # -- one iteration ----------------------------------------------------

    def sample_frame(self) -> Frame:
        frames = self.dataset.frames
        if self.stage == 3:
            cid = sample_refinement_camera(self.stack, self.rng)
            choices = self.dataset.frames_for(cid)
            return frames[choices[int(self.rng.integers(len(choices)))]]
        return frames[int(self.rng.integers(len(frames)))]

    def train_step(self) -> dict:
        cfg = self.config
        stage, it = self.stage, self.iteration
        frame = self.sample_frame()
        deform = stage >= 2
        model = self.model
        out, ctx = model.render(frame.camera, frame.time, deform=deform)
        closs, g_img, parts = color_loss(out.image, frame.image, cfg.lambda_ssim)
        vol = volume_regularization(ctx["gauss"].scale)[0] if ctx else 0.0
        tv, tv_back = tv_loss(model.field) if deform else (0.0, None)
        loss = total_loss(closs, tv, vol, cfg.weights)
        if not math.isfinite(loss):
            raise NonFiniteLossError(stage, it, loss)
        grads, gnorms, vis = model.backward(ctx, g_img, cfg.lambda_vol)
        if deform:
            for name, g in tv_back(cfg.lambda_tv).items():
                grads[name] = grads.get(name, 0.0) + g
        self.apply_gradients(grads, None if deform else STATIC_GROUPS)
        if ctx is not None:
            self.stats.record(vis, gnorms, ctx["keep"], ctx["gauss"].opacity)
        view_psnr = psnr(out.image, frame.image)
        grad_norm = float(np.mean(gnorms[ctx["keep"]])) if ctx is not None and np.any(ctx["keep"]) else 0.0
        fq = fg = False
        if stage == 2:
            fq, fg = self.detect(frame.camera_id, view_psnr, grad_norm)
        grow, prune = densify_schedule_active(it, cfg.densify_start, cfg.densify_interval, cfg.grow_until)
        if grow or prune:
            self.densify(grow, prune)
        row = dict(step=self.step, stage=stage, iteration=it, camera=int(frame.camera_id),
                   time=float(frame.time), loss=float(loss), l1=float(parts["l1"]), ssim=float(parts["ssim"]),
                   tv=float(tv), vol=float(vol), psnr=float(view_psnr), anchors=len(model.anchors),
                   gaussians=len(ctx["gauss"]) if ctx else 0, grad_norm=grad_norm,
                   flag_quality=int(fq), flag_gradient=int(fg))
        self.metrics.append(row)
        self.iteration += 1
        self.step += 1
        return row

    def detect(self, camera_id: int, view_psnr: float, grad_norm: float) -> tuple[bool, bool]:
        """Run both detectors for one stage-2 render and update the refinement stack."""
        cfg = self.config
        self.detector_calls += 1
        if self.scripted_metrics is not None:
            view_psnr, grad_norm = self.scripted_metrics(self.iteration, camera_id, view_psnr, grad_norm)
        gamma = gamma_value(self.iteration, cfg.stage2_iterations, cfg.gamma_start, cfg.gamma_end)
        q_thresh = (1.0 + gamma) * self.psnr_tracker.value
        g_thresh = (1.0 + gamma) * self.grad_tracker.value
        fq, self.psnr_tracker = detect_crude_psnr(self.psnr_tracker, view_psnr, gamma)
        fg, self.grad_tracker = detect_crude_gradient(self.grad_tracker, grad_norm, gamma)
        if self.iteration < cfg.flag_warmup:
            return False, False
        deficits = []
        if fq and q_thresh > 0:
            deficits.append(((q_thresh - view_psnr) / q_thresh, "quality"))
        if fg and g_thresh > 0:
            deficits.append((grad_norm / g_thresh - 1.0, "gradient"))
        if deficits:
            deficit, kind = max(deficits)
            update_refinement_stack(self.stack, camera_id, kind, deficit, self.step)
        return fq, fg

    # -- stages -----------------------------------------------------------

    def flagged_view_psnr(self) -> float:
        """Mean PSNR over every frame of every camera currently in the refinement stack."""
        vals = []
        for cid in sorted(self.stack):
            for i in self.dataset.frames_for(cid):
                fr = self.dataset.frames[i]
                img, _ = self.model.render(fr.camera, fr.time, deform=True)
                vals.append(psnr(img.image, fr.image))
        return float(np.mean(vals)) if vals else float("nan")

    def run(self, stop_after: tuple[int, int] | None = None,
            on_stage_end: Callable[["Trainer", int], None] | None = None):
        """Train from the current cursor to the end (or until ``stop_after=(stage, iteration)``).

        ``on_stage_end(trainer, stage)`` is invoked after each completed stage.
        """
        while self.stage <= 3:
            stage = self.stage
            n = self.config.stage_iterations(stage)
            if stage == 3 and self.iteration == 0:
                if not self.stack:
                    log.info("refinement stack is empty; skipping stage 3")
                    self._finish_stage(on_stage_end)
                    continue
                self.refinement_report = {"cameras": sorted(self.stack), "before": self.flagged_view_psnr()}
            while self.iteration < n:
                if stop_after is not None and (stage, self.iteration) >= stop_after:
                    return self
                self.train_step()
            if stage == 3 and self.refinement_report is not None:
                self.refinement_report["after"] = self.flagged_view_psnr()
            self._finish_stage(on_stage_end)
        return self

    def _finish_stage(self, on_stage_end):
        stage = self.stage
        self.stage += 1
        self.iteration = 0
        self.stats = DensifyStats.zeros(len(self.model.anchors), self.model.anchors.k)
        if on_stage_end is not None:
            on_stage_end(self, stage)

    @property
    def finished(self) -> bool:
        return self.stage > 3


def run_stage1_coarse(trainer: Trainer) -> Trainer:
    if trainer.stage != 1:
        raise DomainError("stage 1 already completed")
    return trainer.run(stop_after=(2, 0))


def run_stage2_fine(trainer: Trainer) -> Trainer:
    if trainer.stage != 2:
        raise DomainError("stage 2 requires a completed stage 1")
    return trainer.run(stop_after=(3, 0))


def run_stage3_refine(trainer: Trainer) -> Trainer:
    if trainer.stage != 3:
        raise DomainError("stage 3 requires a completed stage 2")
    return trainer.run()


def evaluate(model: NeuralVoxelModel, dataset: Dataset) -> list[dict]:
    from .losses import ms_ssim, ssim

    rows = []
    for i, fr in enumerate(dataset.frames):
        out, _ = model.render(fr.camera, fr.time, deform=True)
        rows.append(dict(frame=i, camera=fr.camera_id, time=fr.time, psnr=psnr(out.image, fr.image),
                         ssim=ssim(out.image, fr.image), ms_ssim=ms_ssim(out.image, fr.image)))
    return rows
