"""Command-line entry point: synth, train, render, eval, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractError, DatasetError, DomainError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("voxsplat")


class UsageError(Exception):
    pass


def _unit_time(text: str) -> float:
    try:
        t = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= t <= 1.0:
        raise argparse.ArgumentTypeError(f"time must lie in [0, 1], got {t}")
    return t


def _read_mapping(path) -> dict:
    from .dataset import load_spec_file

    try:
        data = load_spec_file(path)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: expected a mapping at the top level")
    return data


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .dataset import SyntheticSpec, generate_synthetic_scene, write_dataset

    try:
        spec = SyntheticSpec.from_dict(_read_mapping(args.spec))
    except (TypeError, DomainError) as exc:
        raise DatasetError(f"{args.spec}: {exc}") from exc
    ds = generate_synthetic_scene(spec, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, restore_trainer, save_checkpoint
    from .dataset import load_dataset
    from .plotting import plot_training, write_csv
    from .training import METRIC_FIELDS, TrainConfig, Trainer

    dataset = load_dataset(args.data)
    try:
        config = TrainConfig.from_dict(_read_mapping(args.config))
    except (TypeError, DomainError) as exc:
        raise DatasetError(f"{args.config}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = restore_trainer(load_checkpoint(args.resume), dataset)
        if trainer.config.to_dict() != config.to_dict():
            log.warning("--config differs from the checkpoint; continuing with the checkpoint's config")
        print(f"resuming at stage {trainer.stage}, iteration {trainer.iteration}")
    else:
        trainer = Trainer(dataset, config)

    def stage_done(tr, stage):
        path = save_checkpoint(tr, out / f"stage{stage}.nvs")
        last = tr.metrics[-1] if tr.metrics else {}
        print(f"stage {stage} done: anchors {len(tr.model.anchors)}, last view PSNR "
              f"{last.get('psnr', float('nan')):.2f} dB, checkpoint {path}")

    trainer.run(on_stage_end=stage_done)
    save_checkpoint(trainer, out / "final.nvs")
    write_csv(trainer.metrics, out / "metrics.csv", METRIC_FIELDS)
    if trainer.metrics:
        plot_training(trainer.metrics, out / "training.png")
    report = dict(trainer.refinement_report or {}, stack=[
        dict(camera=e.camera_id, failure=e.failure_type, severity=e.severity, hits=e.hits, priority=e.priority)
        for e in sorted(trainer.stack.values(), key=lambda e: (-e.priority, e.camera_id))])
    (out / "refinement.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if trainer.refinement_report and "after" in trainer.refinement_report:
        r = trainer.refinement_report
        print(f"flagged-view PSNR {r['before']:.2f} -> {r['after']:.2f} dB")
    return EXIT_OK


def _camera_from_arg(text: str, cameras):
    from .checkpoint import camera_from_dict
    from .dataset import camera_from_c2w

    if text.lstrip("-").isdigit():
        idx = int(text)
        if not 0 <= idx < len(cameras):
            raise UsageError(f"camera index {idx} out of range (checkpoint has {len(cameras)} cameras)")
        return cameras[idx]
    d = _read_mapping(text)
    try:
        if "transform_matrix" in d:
            return camera_from_c2w(d["transform_matrix"], d["fl_x"], d.get("fl_y", d["fl_x"]),
                                   d["cx"], d["cy"], d["w"], d["h"])
        return camera_from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{text}: bad camera description ({exc})") from exc


def cmd_render(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    camera = _camera_from_arg(args.camera, ckpt.cameras)
    out, _ = ckpt.model.render(camera, args.time, deform=True)
    pixels = np.round(np.clip(out.image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(args.out)
    print(f"rendered {camera.width}x{camera.height} at t={args.time} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .plotting import plot_evaluation, write_csv
    from .training import evaluate

    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    rows = evaluate(ckpt.model, dataset)
    out = Path(args.out)
    write_csv(rows, out, ["frame", "camera", "time", "psnr", "ssim", "ms_ssim"])
    plot_evaluation(rows, out.with_suffix(".png"))
    means = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "ms_ssim")}
    print("mean " + ", ".join(f"{k} {v:.4f}" for k, v in means.items()))
    return EXIT_OK


def cmd_export(args) -> int:
    from .checkpoint import load_checkpoint
    from .export import export_gaussians

    ckpt = load_checkpoint(args.ckpt)
    path = export_gaussians(ckpt.model, args.time, args.out)
    print(f"exported {len(ckpt.model.anchors) * ckpt.model.anchors.k} Gaussians to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxsplat", description="Dynamic neural-voxel Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic moving-blob dataset")
    s.add_argument("--spec", required=True, help="JSON/YAML scene spec")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run the three-stage optimization")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True, help="JSON/YAML training config")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one view to PNG")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", required=True, help="camera index stored in the checkpoint, or a camera JSON file")
    s.add_argument("--time", type=_unit_time, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="per-frame PSNR/SSIM/MS-SSIM table and figure")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="CSV path; a PNG figure is written next to it")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="write deformed Gaussians at one time as PLY")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--time", type=_unit_time, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ContractError, DomainError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
