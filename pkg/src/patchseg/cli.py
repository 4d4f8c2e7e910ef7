"""Command-line entry point.

Subcommands: gen-data, train, eval, infer, gradcheck, ablation,
compare-cam.  Exit codes: 0 ok, 1 check failed, 2 bad input, 3 runtime
failure.  Multi-valued settings come from a single JSON config document
with optional "dataset", "encoder", and "train" sections; unknown keys
are rejected.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from . import train_eval
from .data import DatasetSpec, generate, load_dataset, save_dataset
from .encoder import EncoderConfig
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    GenerationError,
    NumericError,
    PatchsegError,
    ShapeError,
)
from .train_eval import (
    TrainConfig,
    ablation,
    cam_baseline_train_eval,
    evaluate,
    gradcheck,
    load_checkpoint,
    toggle_configs,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_RUNTIME = 3

_SECTIONS = ("dataset", "encoder", "train")
_SECTION_TYPES = {"dataset": DatasetSpec, "encoder": EncoderConfig, "train": TrainConfig}


def _strict_dataclass(cls, payload: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r} section: {unknown}")
    if "classes" in payload and section == "dataset":
        payload = dict(payload, classes=tuple(payload["classes"]))
    if "shapes_per_image" in payload and section == "dataset":
        payload = dict(payload, shapes_per_image=tuple(payload["shapes_per_image"]))
    if "shift" in payload:
        payload = dict(payload, shift=tuple(payload["shift"]))
    return cls(**payload)


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    out = {}
    for section, payload in doc.items():
        if not isinstance(payload, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        out[section] = _strict_dataclass(_SECTION_TYPES[section], payload, section)
    return out


def _require(cfg: dict, section: str, path):
    if section not in cfg:
        raise ConfigError(f"config {path} is missing the {section!r} section")
    return cfg[section]


def _load_split(args) -> tuple[list, list]:
    train_samples = load_dataset(args.data)
    if getattr(args, "val_data", None):
        return train_samples, load_dataset(args.val_data)
    frac = getattr(args, "val_split", None)
    if frac:
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"--val-split must be in (0, 1), got {frac}")
        cut = int(round(len(train_samples) * (1.0 - frac)))
        if cut in (0, len(train_samples)):
            raise ConfigError("--val-split leaves an empty split")
        return train_samples[:cut], train_samples[cut:]
    return train_samples, []


def _write_report(path, payload: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _print_eval(report, upscale: int):
    print(f"inference upscale: x{upscale}")
    for k, iou in enumerate(report.per_class_iou):
        label = "background" if k == 0 else f"class {k}"
        text = "  n/a" if np.isnan(iou) else f"{iou:.4f}"
        print(f"  IoU {label:<12} {text}")
    print(f"  mIoU          {report.miou:.4f}")
    print(f"  pixel acc     {report.pixel_accuracy:.4f}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.spec)
    spec = _require(cfg, "dataset", args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {out} ({exc})", file=sys.stderr)
        return EXIT_BAD_INPUT
    samples = generate(spec)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_cfg = _require(cfg, "train", args.config)
    encoder_cfg = cfg.get("encoder", EncoderConfig())
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    train_samples, val_samples = _load_split(args)
    result = train(train_cfg, encoder_cfg, train_samples, val_samples or None, out_dir=args.out)
    last = result.metrics[-1] if result.metrics else {}
    best = f", best val mIoU {result.best_val_miou:.4f}" if result.best_val_miou is not None else ""
    print(f"trained {len(result.metrics)} epochs{best}")
    if last:
        print(f"final losses: {json.dumps(last, sort_keys=True)}")
    print(f"checkpoint: {Path(args.out) / 'best'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    report = evaluate(ckpt, samples, upscale_factor=args.upscale)
    _print_eval(report, args.upscale)
    if args.out:
        _write_report(
            args.out,
            {"kind": "eval_report", "upscale_factor": args.upscale, "report": report.to_dict()},
        )
    return EXIT_OK


def _save_palette_png(values: np.ndarray, path, size=None):
    im = data_mod._mask_palette_image(values)
    if size is not None and im.size != size:
        im = im.resize(size, resample=Image.NEAREST)
    im.save(path)


def _save_heatmap_png(values: np.ndarray, path, size=None):
    """values in [0, 1] saved as a yellow-hot palette image whose pixel
    values are round(255 * v)."""
    idx = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(idx, mode="P")
    palette = []
    for v in range(256):
        palette.extend((v, v, max(0, 2 * v - 255)))
    im.putpalette(palette)
    if size is not None and im.size != size:
        im = im.resize(size, resample=Image.NEAREST)
    im.save(path)


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "pcm":
        raise ConfigError(f"inference needs a pcm checkpoint, got {ckpt.kind!r}")
    img_path = Path(args.image)
    if not img_path.is_file():
        raise DataError(f"image not found: {img_path}")
    with Image.open(img_path) as im:
        im = im.convert("RGB")
        orig_size = im.size
        side = ckpt.encoder_config.image_side
        if im.size != (side, side):
            im = im.resize((side, side), resample=Image.BILINEAR)
        image = np.asarray(im, dtype=np.float64) / 255.0
    model = ckpt.build_model()
    z = model.forward_grids(image[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = np.argmax(z, axis=-1)
    _save_palette_png(cells, out / "pseudo_mask.png", size=orig_size)
    written = ["pseudo_mask.png"]
    if args.heatmaps:
        g, _, k = z.shape
        y = z.reshape(g * g, k).max(axis=0)
        keep = [0] + [i for i in range(1, k) if y[i] > 0.5]
        for cls in keep:
            name = f"heatmap_class{cls}.png"
            _save_heatmap_png(z[:, :, cls], out / name, size=orig_size)
            written.append(name)
    print(f"wrote {', '.join(written)} to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(trials=args.trials, tolerance=args.tol, seed=args.seed or 0)
    status = "pass" if report.passed else "FAIL"
    print(
        f"gradcheck: {status} ({report.trials} trials, max rel error "
        f"{report.max_rel_error:.3e}, tolerance {report.tolerance:.1e}, "
        f"{report.redraws} redraws)"
    )
    if args.out:
        _write_report(args.out, {"kind": "gradcheck_report", **report.to_dict()})
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_ablation(args) -> int:
    cfg = load_config(args.config)
    base = _require(cfg, "train", args.config)
    encoder_cfg = cfg.get("encoder", EncoderConfig())
    train_samples, val_samples = _load_split(args)
    if not val_samples:
        raise ConfigError("ablation needs a validation split (--val-data or --val-split)")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = ablation(
        toggle_configs(base),
        encoder_cfg,
        train_samples,
        val_samples,
        seeds=seeds,
        upscale_factor=args.upscale,
    )
    print(result.table())
    if args.out:
        _write_report(args.out, {"kind": "ablation_report", "seeds": seeds, **result.to_dict()})
    return EXIT_OK


def cmd_compare_cam(args) -> int:
    cfg = load_config(args.config)
    base = _require(cfg, "train", args.config)
    encoder_cfg = cfg.get("encoder", EncoderConfig())
    train_samples, val_samples = _load_split(args)
    if not val_samples:
        raise ConfigError("comparison needs a validation split (--val-data or --val-split)")
    seeds = [int(s) for s in args.seeds.split(",")]
    pcm_rows = []
    cam_rows = []
    thresholds = []
    for seed in seeds:
        run_cfg = replace(base, seed=seed, use_et=True, use_conditioning=True)
        res = train(run_cfg, encoder_cfg, train_samples, val_samples)
        pcm_report = evaluate(res.checkpoint, val_samples, upscale_factor=args.upscale)
        pcm_rows.append({"seed": seed, "miou": pcm_report.miou})
        cam_res = cam_baseline_train_eval(
            replace(base, seed=seed), encoder_cfg, train_samples, val_samples,
            upscale_factor=args.upscale,
        )
        cam_rows.append({"seed": seed, "miou": cam_res.report.miou})
        thresholds.append(cam_res.threshold)
    pcm_mean = float(np.mean([r["miou"] for r in pcm_rows]))
    cam_mean = float(np.mean([r["miou"] for r in cam_rows]))
    print("head          " + "  ".join(f"seed={r['seed']}" for r in pcm_rows) + "  mean")
    print("PCM           " + "  ".join(f"{r['miou']:.4f}" for r in pcm_rows) + f"  {pcm_mean:.4f}")
    print("CAM           " + "  ".join(f"{r['miou']:.4f}" for r in cam_rows) + f"  {cam_mean:.4f}")
    if args.out:
        _write_report(
            args.out,
            {
                "kind": "cam_comparison_report",
                "seeds": seeds,
                "pcm": {"per_seed": pcm_rows, "mean_miou": pcm_mean},
                "cam": {
                    "per_seed": cam_rows,
                    "mean_miou": cam_mean,
                    "thresholds": thresholds,
                },
            },
        )
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchseg",
        description="Patch-level weakly supervised segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--spec", required=True, help="JSON config with a 'dataset' section")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the patch classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-split", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--upscale", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="pseudo-mask (and heatmaps) for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmaps", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="verify the analytic head gradient")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablation", help="loss-toggle ablation over shared seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-split", type=float, default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--upscale", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("compare-cam", help="max-pool head vs pooled-average baseline")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-split", type=float, default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--upscale", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare_cam)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataError, ShapeError, NumericError, GenerationError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except PatchsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
