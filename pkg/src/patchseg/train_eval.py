"""Two-phase training, segmentation scoring, ablation harness, the
pooled-average-baseline comparison, and the analytic-gradient check."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from .data import SyntheticSample, augment
from .encoder import EncoderConfig
from .equivariance import GridTransform, two_branch_step
from .errors import ConfigError, DivergenceError, ShapeError
from .model import CamModel, SegModel
from .nn import Adam, sigmoid
from .pcm_core import (
    ClassWeights,
    LabelVector,
    PatchFeatureGrid,
    gmp,
    mce_grad_analytic,
    mce_loss,
    patch_distribution,
    patch_logits,
    pooled_bce_flat,
)

# Optional mask refinement plug-in: takes one (g, g, K) distribution
# grid and the input image, returns a refined (n, n) category mask.
# Declared for downstream post-processing; nothing in this package
# implements it.
RefinementHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 12
    phase2_epochs: int = 48
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    l2_coeff: float = 0.01
    batch_size: int = 16
    unfrozen_blocks: int = 2
    use_et: bool = True
    use_conditioning: bool = True
    use_augment: bool = True
    patience: int = 10
    eval_upscale: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.use_et and self.batch_size % 4 != 0:
            raise ConfigError(
                f"batch_size {self.batch_size} must be divisible by 4 when the "
                "equivariance branch is enabled"
            )
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")


@dataclass
class EvalReport:
    per_class_iou: np.ndarray  # (K,), NaN where a class never occurs
    miou: float
    pixel_accuracy: float
    confusion: np.ndarray  # (K, K) int64, rows = ground truth

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [
                None if np.isnan(v) else float(v) for v in self.per_class_iou
            ],
            "miou": float(self.miou),
            "pixel_accuracy": float(self.pixel_accuracy),
            "confusion": self.confusion.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        iou = np.array(
            [np.nan if v is None else float(v) for v in d["per_class_iou"]]
        )
        return EvalReport(
            per_class_iou=iou,
            miou=float(d["miou"]),
            pixel_accuracy=float(d["pixel_accuracy"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
        )


@dataclass
class Checkpoint:
    kind: str  # "pcm" or "cam"
    num_classes: int
    encoder_config: EncoderConfig
    train_config: TrainConfig
    model_arrays: dict
    opt_arrays: dict
    extra: dict = field(default_factory=dict)

    def build_model(self):
        if self.kind == "pcm":
            model = SegModel(
                self.encoder_config,
                self.num_classes,
                use_conditioning=self.train_config.use_conditioning,
                seed=self.train_config.seed,
            )
        elif self.kind == "cam":
            model = CamModel(self.encoder_config, self.num_classes, seed=self.train_config.seed)
        else:
            raise ConfigError(f"unknown checkpoint kind {self.kind!r}")
        model.load_state_arrays(self.model_arrays)
        return model


def save_checkpoint(ckpt: Checkpoint, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"model.{k}": v for k, v in ckpt.model_arrays.items()}
    arrays.update(ckpt.opt_arrays)
    container.save_arrays(out / "arrays.na", arrays)
    snapshot = {
        "kind": ckpt.kind,
        "num_classes": ckpt.num_classes,
        "encoder": dataclasses.asdict(ckpt.encoder_config),
        "train": dataclasses.asdict(ckpt.train_config),
        "extra": ckpt.extra,
    }
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)


def load_checkpoint(in_dir) -> Checkpoint:
    root = Path(in_dir)
    cfg_path = root / "config.json"
    if not cfg_path.is_file():
        raise ConfigError(f"missing checkpoint config: {cfg_path}")
    with open(cfg_path, "r", encoding="utf-8") as f:
        snapshot = json.load(f)
    arrays = container.load_arrays(root / "arrays.na")
    model_arrays = {
        k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")
    }
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    enc = EncoderConfig(**snapshot["encoder"])
    enc = replace(enc, mlp_ratio=float(snapshot["encoder"]["mlp_ratio"]))
    train_kwargs = dict(snapshot["train"])
    return Checkpoint(
        kind=snapshot["kind"],
        num_classes=int(snapshot["num_classes"]),
        encoder_config=enc,
        train_config=TrainConfig(**train_kwargs),
        model_arrays=model_arrays,
        opt_arrays=opt_arrays,
        extra=snapshot.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Pixel-count matrix with ground truth on rows."""
    if gt.shape != pred.shape:
        raise ShapeError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    idx = num_classes * gt.reshape(-1) + pred.reshape(-1)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def report_from_confusion(confusion: np.ndarray) -> EvalReport:
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    total = confusion.sum()
    return EvalReport(
        per_class_iou=iou,
        miou=float(np.nanmean(iou)),
        pixel_accuracy=float(tp.sum() / total) if total else float("nan"),
        confusion=confusion,
    )


def _upscale_image(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def predict_mask(model: SegModel, image: np.ndarray, upscale_factor: int = 1) -> np.ndarray:
    """Pixel-resolution category mask for one image."""
    z = predict_grids(model, image[None], upscale_factor)[0]
    return grid_to_pixel_mask(np.argmax(z, axis=-1), image.shape[0])


def predict_grids(model: SegModel, images: np.ndarray, upscale_factor: int = 1) -> np.ndarray:
    cfg = model.encoder_config
    if upscale_factor < 1 or cfg.patch_side % upscale_factor != 0:
        raise ConfigError(
            f"upscale factor {upscale_factor} must divide the patch side {cfg.patch_side}"
        )
    if upscale_factor > 1:
        images = np.repeat(np.repeat(images, upscale_factor, axis=1), upscale_factor, axis=2)
    return model.forward_grids(np.ascontiguousarray(images), upscale=upscale_factor)


def grid_to_pixel_mask(cell_mask: np.ndarray, pixel_side: int) -> np.ndarray:
    g = cell_mask.shape[0]
    if pixel_side % g != 0:
        raise ShapeError(f"grid side {g} does not divide pixel side {pixel_side}")
    f = pixel_side // g
    return np.repeat(np.repeat(cell_mask, f, axis=0), f, axis=1)


def evaluate_model(
    model: SegModel,
    samples: list[SyntheticSample],
    upscale_factor: int = 2,
    batch_size: int = 32,
    refinement: RefinementHook | None = None,
) -> EvalReport:
    k = model.num_classes
    if samples and samples[0].labels.num_classes != k:
        raise ConfigError(
            f"dataset has {samples[0].labels.num_classes} classes, model has {k}"
        )
    conf = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        grids = predict_grids(model, images, upscale_factor)
        for s, z in zip(chunk, grids):
            if refinement is not None:
                mask = refinement(z, s.image)
            else:
                mask = grid_to_pixel_mask(np.argmax(z, axis=-1), s.image.shape[0])
            conf += confusion_matrix(s.mask, mask, k)
    return report_from_confusion(conf)


def evaluate(
    checkpoint: Checkpoint,
    samples: list[SyntheticSample],
    upscale_factor: int = 2,
    refinement: RefinementHook | None = None,
) -> EvalReport:
    """Score a checkpoint on labeled samples at the given inference scale."""
    model = checkpoint.build_model()
    if checkpoint.kind == "cam":
        threshold = checkpoint.extra.get("cam_threshold", 0.5)
        return evaluate_cam_model(model, samples, threshold, upscale_factor)
    return evaluate_model(model, samples, upscale_factor, refinement=refinement)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    best_val_miou: float | None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def _sample_transform(rng: np.random.Generator, grid_side: int, patch_side: int) -> GridTransform:
    return GridTransform(
        rotation=int(rng.integers(0, 4)) * 90,
        hflip=bool(rng.integers(0, 2)),
        vflip=bool(rng.integers(0, 2)),
        shift=(
            int(rng.integers(0, grid_side)) * patch_side,
            int(rng.integers(0, grid_side)) * patch_side,
        ),
    )


def _prepare_batch(samples, idx, config: TrainConfig, rng: np.random.Generator):
    images = []
    labels = []
    for i in idx:
        s = samples[int(i)]
        if config.use_augment:
            s = augment(s, seed=int(rng.integers(0, 2**63)))
        images.append(s.image)
        labels.append(s.labels.t)
    return np.stack(images), np.stack(labels).astype(np.float64)


def _single_branch_step(model: SegModel, images, labels, backward=True):
    z = model.forward_grids(images)
    b, g = z.shape[0], z.shape[1]
    k = z.shape[3]
    total = 0.0
    d_z = np.zeros_like(z)
    for i in range(b):
        flat = z[i].reshape(g * g, k)
        loss_i, idx, d_y, _ = pooled_bce_flat(flat, labels[i])
        total += loss_i
        if backward:
            d_flat = np.zeros_like(flat)
            d_flat[idx, np.arange(k)] = d_y / b
            d_z[i] = d_flat.reshape(g, g, k)
    if backward:
        model.backward_grids(d_z)
    return total / b


def train(
    config: TrainConfig,
    encoder_config: EncoderConfig,
    train_samples: list[SyntheticSample],
    val_samples: list[SyntheticSample] | None = None,
    out_dir=None,
) -> TrainResult:
    """Two-phase optimization.

    Phase 1 trains the head (and conditioning) against a frozen encoder;
    phase 2 additionally unfreezes the trailing encoder blocks at a
    lower learning rate and early-stops on validation mIoU.
    """
    if not train_samples:
        raise ConfigError("empty training set")
    k = train_samples[0].labels.num_classes
    model = SegModel(
        encoder_config, k, use_conditioning=config.use_conditioning, seed=config.seed
    )
    rng = np.random.default_rng(config.seed)
    g = encoder_config.grid_side
    d = encoder_config.patch_side
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    best_val = None
    best_arrays = None
    best_opt: dict = {}
    epochs_since_best = 0
    step = 0
    opt = Adam(config.lr_phase1)
    epoch = 0

    def run_epoch():
        nonlocal step
        sums = {"mce": 0.0, "et": 0.0}
        count = 0
        for idx in _batches(len(train_samples), config.batch_size, rng):
            images, labels = _prepare_batch(train_samples, idx, config, rng)
            model.zero_grads()
            if config.use_et:
                t1 = [_sample_transform(rng, g, d) for _ in range(len(idx))]
                t2 = [_sample_transform(rng, g, d) for _ in range(len(idx) // 4)]
                mce, et, _total = two_branch_step(
                    images, labels, model, t1, t2, d, backward=True
                )
            else:
                mce = _single_branch_step(model, images, labels)
                et = 0.0
            if config.l2_coeff:
                model.head_w.grad += 2.0 * config.l2_coeff * model.head_w.value
            if not np.isfinite(mce) or not np.isfinite(et):
                raise DivergenceError(step, f"mce={mce} et={et}")
            opt.step(model.trainable_params())
            sums["mce"] += mce
            sums["et"] += et
            count += 1
            step += 1
        return sums, max(count, 1)

    def finish_epoch(phase: int, sums, count):
        nonlocal best_val, best_arrays, best_opt, epochs_since_best
        record = {
            "epoch": epoch,
            "phase": phase,
            "loss_mce": sums["mce"] / count,
            "loss_et": sums["et"] / count,
            "loss_total": (sums["mce"] + sums["et"]) / count,
        }
        if val_samples:
            report = evaluate_model(model, val_samples, config.eval_upscale)
            record["val_miou"] = report.miou
            if best_val is None or report.miou > best_val:
                best_val = report.miou
                best_arrays = model.state_arrays()
                best_opt = opt.state_arrays()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
        metrics.append(record)
        if out is not None:
            save_checkpoint(
                _make_checkpoint(model, config, encoder_config, opt), out / f"epoch_{epoch:03d}"
            )
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")

    model.set_trainable_phase(0)
    for _ in range(config.phase1_epochs):
        sums, count = run_epoch()
        finish_epoch(1, sums, count)
        epoch += 1

    model.set_trainable_phase(config.unfrozen_blocks)
    opt = Adam(config.lr_phase2)
    epochs_since_best = 0
    for _ in range(config.phase2_epochs):
        sums, count = run_epoch()
        finish_epoch(2, sums, count)
        epoch += 1
        if val_samples and epochs_since_best >= config.patience:
            break

    if best_arrays is not None:
        model.load_state_arrays(best_arrays)
        opt_arrays = best_opt
    else:
        opt_arrays = opt.state_arrays()
    ckpt = Checkpoint(
        kind="pcm",
        num_classes=k,
        encoder_config=encoder_config,
        train_config=config,
        model_arrays=model.state_arrays(),
        opt_arrays=opt_arrays,
    )
    if out is not None:
        save_checkpoint(ckpt, out / "best")
    return TrainResult(checkpoint=ckpt, metrics=metrics, best_val_miou=best_val)


def _make_checkpoint(model: SegModel, config, encoder_config, opt) -> Checkpoint:
    return Checkpoint(
        kind="pcm",
        num_classes=model.num_classes,
        encoder_config=encoder_config,
        train_config=config,
        model_arrays=model.state_arrays(),
        opt_arrays=opt.state_arrays(),
    )


# ---------------------------------------------------------------------------
# pooled-average baseline (class activation mapping)
# ---------------------------------------------------------------------------

def _bce_with_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean BCE over classes and batch; returns (loss, d loss/d logits)."""
    p = sigmoid(logits)
    pc = np.clip(p, 1e-7, 1.0 - 1e-7)
    loss = float(
        -np.mean(targets * np.log(pc) + (1.0 - targets) * np.log(1.0 - pc))
    )
    d = (p - targets) / logits.size
    return loss, d


def cam_scores_to_mask(
    scores: np.ndarray, threshold: float, pixel_side: int
) -> np.ndarray:
    """Per-patch foreground scores (g, g, C) -> pixel mask.

    Scores are min-max normalized per image; cells whose best normalized
    score falls below the threshold become background.
    """
    smin = scores.min()
    smax = scores.max()
    norm = (scores - smin) / (smax - smin + 1e-12)
    best = np.argmax(norm, axis=-1)
    peak = np.max(norm, axis=-1)
    cells = np.where(peak >= threshold, best + 1, 0)
    return grid_to_pixel_mask(cells, pixel_side)


def evaluate_cam_model(
    model: CamModel,
    samples: list[SyntheticSample],
    threshold: float,
    upscale_factor: int = 2,
    batch_size: int = 32,
) -> EvalReport:
    k = model.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    cfg = model.encoder_config
    if upscale_factor < 1 or cfg.patch_side % upscale_factor != 0:
        raise ConfigError(
            f"upscale factor {upscale_factor} must divide the patch side {cfg.patch_side}"
        )
    g = cfg.grid_side * upscale_factor
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([_upscale_image(s.image, upscale_factor) for s in chunk])
        _logits, scores = model.forward(images, upscale=upscale_factor)
        for s, sc in zip(chunk, scores):
            grid = sc.reshape(g, g, model.num_foreground)
            mask = cam_scores_to_mask(grid, threshold, s.image.shape[0])
            conf += confusion_matrix(s.mask, mask, k)
    return report_from_confusion(conf)


@dataclass
class CamResult:
    checkpoint: Checkpoint
    report: EvalReport
    threshold: float
    calibration_miou: float
    metrics: list[dict]


def cam_baseline_train_eval(
    config: TrainConfig,
    encoder_config: EncoderConfig,
    train_samples: list[SyntheticSample],
    val_samples: list[SyntheticSample],
    calibration_size: int = 128,
    upscale_factor: int = 2,
) -> CamResult:
    """Train the pooled-average classifier on the same encoder, pick the
    background threshold on the train split, and score the val split."""
    k = train_samples[0].labels.num_classes
    model = CamModel(encoder_config, k, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    metrics = []
    step = 0
    epoch = 0

    def run_phase(epochs: int, lr: float, phase: int):
        nonlocal step, epoch
        opt = Adam(lr)
        for _ in range(epochs):
            sums = 0.0
            count = 0
            for idx in _batches(len(train_samples), config.batch_size, rng):
                images, labels = _prepare_batch(train_samples, idx, config, rng)
                model.zero_grads()
                logits, _scores = model.forward(images)
                loss, d_logits = _bce_with_logits(logits, labels[:, 1:])
                if not np.isfinite(loss):
                    raise DivergenceError(step, f"bce={loss}")
                model.backward(d_logits)
                if config.l2_coeff:
                    model.head_w.grad += 2.0 * config.l2_coeff * model.head_w.value
                opt.step(model.trainable_params())
                sums += loss
                count += 1
                step += 1
            metrics.append({"epoch": epoch, "phase": phase, "loss_bce": sums / max(count, 1)})
            epoch += 1

    model.set_trainable_phase(0)
    run_phase(config.phase1_epochs, config.lr_phase1, 1)
    model.set_trainable_phase(config.unfrozen_blocks)
    run_phase(config.phase2_epochs, config.lr_phase2, 2)

    calib = train_samples[:calibration_size]
    best_tau, best_miou = 0.5, -1.0
    for tau in np.linspace(0.05, 0.95, 19):
        miou = evaluate_cam_model(model, calib, float(tau), upscale_factor).miou
        if miou > best_miou:
            best_tau, best_miou = float(tau), miou
    report = evaluate_cam_model(model, val_samples, best_tau, upscale_factor)
    ckpt = Checkpoint(
        kind="cam",
        num_classes=k,
        encoder_config=encoder_config,
        train_config=config,
        model_arrays=model.state_arrays(),
        opt_arrays={},
        extra={"cam_threshold": best_tau},
    )
    return CamResult(
        checkpoint=ckpt,
        report=report,
        threshold=best_tau,
        calibration_miou=best_miou,
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def composed_mce_loss(f: np.ndarray, w: np.ndarray, t: np.ndarray) -> float:
    """The full pipeline loss as a function of the head weights."""
    grid_side = int(round(np.sqrt(f.shape[0])))
    features = PatchFeatureGrid(values=f, grid_side=grid_side)
    logits = patch_logits(features, ClassWeights(values=w))
    dist = patch_distribution(logits)
    pred = gmp(dist)
    return mce_loss(pred, LabelVector(t=t, require_background=False))


def finite_difference_grad(f: np.ndarray, w: np.ndarray, t: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the composed loss w.r.t. each weight."""
    grad = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            wp = w.copy()
            wp[i, j] += step
            wm = w.copy()
            wm[i, j] -= step
            grad[i, j] = (composed_mce_loss(f, wp, t) - composed_mce_loss(f, wm, t)) / (
                2.0 * step
            )
    return grad


def max_column_gap_ok(z: np.ndarray, min_gap: float = 1e-3) -> bool:
    """True when every class column has a clear, untied maximum."""
    if z.shape[0] < 2:
        return True
    part = np.sort(z, axis=0)
    return bool(np.all(part[-1] - part[-2] >= min_gap))


@dataclass
class GradcheckReport:
    trials: int
    tolerance: float
    max_rel_error: float
    failures: int
    redraws: int
    passed: bool
    num_patches: int
    feature_dim: int
    num_classes: int
    seed: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def gradcheck(
    trials: int,
    tolerance: float = 1e-5,
    num_patches: int = 16,
    feature_dim: int = 8,
    num_classes: int = 5,
    seed: int = 0,
    fd_step: float = 1e-5,
) -> GradcheckReport:
    """Compare the closed-form weight gradient against central finite
    differences of the composed loss on random tie-free instances."""
    if trials < 1:
        raise ConfigError("need at least one trial")
    rng = np.random.default_rng(seed)
    max_err = 0.0
    failures = 0
    redraws = 0
    done = 0
    while done < trials:
        f = rng.normal(0.0, 1.0, (num_patches, feature_dim))
        w = rng.normal(0.0, 1.0, (feature_dim, num_classes)) / np.sqrt(feature_dim)
        t = rng.integers(0, 2, size=num_classes)
        t[0] = 1
        grid_side = int(round(np.sqrt(num_patches)))
        features = PatchFeatureGrid(values=f, grid_side=grid_side)
        dist = patch_distribution(patch_logits(features, ClassWeights(values=w)))
        if not max_column_gap_ok(dist.values):
            redraws += 1
            continue
        pred = gmp(dist)
        labels = LabelVector(t=t)
        analytic = mce_grad_analytic(features, dist, pred, labels)
        numeric = finite_difference_grad(f, w, t.astype(np.float64), step=fd_step)
        scale = max(
            float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-12
        )
        rel = float(np.abs(analytic - numeric).max() / scale)
        max_err = max(max_err, rel)
        if rel > tolerance:
            failures += 1
        done += 1
    return GradcheckReport(
        trials=trials,
        tolerance=tolerance,
        max_rel_error=max_err,
        failures=failures,
        redraws=redraws,
        passed=failures == 0,
        num_patches=num_patches,
        feature_dim=feature_dim,
        num_classes=num_classes,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

TOGGLE_PRESETS = (
    ("MCE", {"use_et": False, "use_conditioning": False}),
    ("MCE+ET", {"use_et": True, "use_conditioning": False}),
    ("MCE+ET+HV", {"use_et": True, "use_conditioning": True}),
)


def toggle_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The three loss-toggle variants of a base configuration."""
    return [(name, replace(base, **kw)) for name, kw in TOGGLE_PRESETS]


@dataclass
class AblationRow:
    name: str
    per_seed: list[dict]
    mean_miou: float


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"name": r.name, "per_seed": r.per_seed, "mean_miou": r.mean_miou}
                for r in self.rows
            ]
        }

    def table(self) -> str:
        lines = ["config        " + "  ".join(f"seed={r['seed']}" for r in self.rows[0].per_seed) + "  mean"]
        for r in self.rows:
            vals = "  ".join(f"{x['miou']:.4f}" for x in r.per_seed)
            lines.append(f"{r.name:<12}  {vals}  {r.mean_miou:.4f}")
        return "\n".join(lines)


def ablation(
    named_configs: list[tuple[str, TrainConfig]],
    encoder_config: EncoderConfig,
    train_samples: list[SyntheticSample],
    val_samples: list[SyntheticSample],
    seeds=(0, 1, 2),
    upscale_factor: int = 2,
) -> AblationResult:
    """Run each toggle configuration over shared seeds and report mIoU."""
    if not named_configs:
        raise ConfigError("no configurations given")
    base = named_configs[0][1]
    for name, cfg in named_configs[1:]:
        if replace(
            cfg,
            use_et=base.use_et,
            use_conditioning=base.use_conditioning,
            batch_size=base.batch_size,
        ) != replace(base, batch_size=base.batch_size):
            raise ConfigError(
                f"configuration {name!r} differs from the first one beyond the loss toggles"
            )
    rows = []
    for name, cfg in named_configs:
        per_seed = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            result = train(run_cfg, encoder_config, train_samples, val_samples)
            report = evaluate(result.checkpoint, val_samples, upscale_factor)
            per_seed.append({"seed": int(seed), "miou": report.miou})
        rows.append(
            AblationRow(
                name=name,
                per_seed=per_seed,
                mean_miou=float(np.mean([x["miou"] for x in per_seed])),
            )
        )
    return AblationResult(rows=rows)
