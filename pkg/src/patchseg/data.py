"""Synthetic shapes dataset: textured-noise backgrounds with colored
geometric shapes, exact rasterized masks, and image-level labels derived
from the masks.  Masks never reach training; they exist for evaluation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, GenerationError, ShapeError
from .pcm_core import LabelVector

SHAPE_NAMES = ("circle", "square", "triangle", "cross")

# Base fill colors per shape kind; instances jitter around these.
_BASE_COLORS = {
    "circle": (0.85, 0.20, 0.20),
    "square": (0.20, 0.75, 0.25),
    "triangle": (0.20, 0.35, 0.85),
    "cross": (0.90, 0.80, 0.20),
}

# Palette for mask/pseudo-mask PNGs (index 0 = background).
MASK_PALETTE = [
    (0, 0, 0),
    (217, 51, 51),
    (51, 191, 64),
    (51, 89, 217),
    (230, 204, 51),
    (166, 51, 217),
    (51, 217, 217),
    (217, 128, 51),
    (128, 128, 128),
]


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int = 800
    image_side: int = 64
    classes: tuple = SHAPE_NAMES
    shapes_per_image: tuple[int, int] = (1, 3)
    palette_strength: float = 0.5  # 1: class-colored shapes, 0: color carries no class
    color_jitter: float = 0.12
    texture_amplitude: float = 0.10
    background_range: tuple[float, float] = (0.30, 0.70)
    class_colors: tuple | None = None  # per-class RGB overriding the builtin palette
    seed: int = 0
    min_shape_side: int | None = None
    max_shape_side: int | None = None

    def __post_init__(self):
        if self.num_images < 0:
            raise ConfigError("num_images must be >= 0")
        if self.image_side < 8:
            raise ConfigError("image_side must be >= 8")
        for c in self.classes:
            if c not in SHAPE_NAMES:
                raise ConfigError(f"unknown shape class {c!r}; choices: {SHAPE_NAMES}")
        lo, hi = self.shapes_per_image
        if not (0 <= lo <= hi):
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if not (0.0 <= self.color_jitter <= 0.5):
            raise ConfigError("color_jitter must be in [0, 0.5]")
        b_lo, b_hi = self.background_range
        if not (0.0 <= b_lo < b_hi <= 1.0):
            raise ConfigError(f"bad background_range {self.background_range}")
        if not (0.0 <= self.palette_strength <= 1.0):
            raise ConfigError(f"palette_strength must be in [0, 1], got {self.palette_strength}")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "background_range", (float(b_lo), float(b_hi)))
        if self.class_colors is not None:
            colors = tuple(tuple(float(v) for v in c) for c in self.class_colors)
            if len(colors) != len(self.classes) or any(len(c) != 3 for c in colors):
                raise ConfigError("class_colors needs one RGB triple per class")
            object.__setattr__(self, "class_colors", colors)

    def base_color(self, class_pos: int) -> np.ndarray:
        if self.class_colors is not None:
            return np.array(self.class_colors[class_pos])
        return np.array(_BASE_COLORS[self.classes[class_pos]])

    @property
    def num_classes(self) -> int:
        """Foreground classes plus background."""
        return len(self.classes) + 1

    def shape_side_range(self) -> tuple[int, int]:
        # Default: shapes span at least a 2x2 block of 8-pixel patches
        # but stay well under half the canvas so several can coexist.
        lo = self.min_shape_side or max(8, self.image_side // 4)
        hi = self.max_shape_side or max(lo, int(self.image_side * 0.40))
        return lo, hi


@dataclass
class SyntheticSample:
    image: np.ndarray  # (n, n, 3) float64 in [0, 1]
    mask: np.ndarray  # (n, n) int64, 0 = background
    labels: LabelVector

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"sample image must be (n, n, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )


def derive_labels(mask: np.ndarray, num_classes: int) -> LabelVector:
    """Presence bits from the mask; background is always on."""
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ShapeError(f"mask values outside [0, {num_classes})")
    t = np.zeros(num_classes, dtype=np.int64)
    t[0] = 1
    present = np.unique(mask)
    t[present[present > 0]] = 1
    return LabelVector(t=t)


def _shape_mask(kind: str, n: int, cx: float, cy: float, side: float) -> np.ndarray:
    """Analytic inclusion test of pixel centers for one shape."""
    ys, xs = np.mgrid[0:n, 0:n]
    px = xs + 0.5
    py = ys + 0.5
    half = side / 2.0
    if kind == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half**2
    if kind == "triangle":
        # upright isoceles: apex at the top, base at the bottom
        top = cy - half
        inside_y = (py >= top) & (py <= cy + half)
        width = (py - top) / 2.0
        return inside_y & (np.abs(px - cx) <= width)
    if kind == "cross":
        bar = side / 3.0
        v = (np.abs(px - cx) <= bar / 2.0) & (np.abs(py - cy) <= half)
        h = (np.abs(py - cy) <= bar / 2.0) & (np.abs(px - cx) <= half)
        return v | h
    raise ConfigError(f"unknown shape kind {kind!r}")


def _background_from_base(rng: np.random.Generator, n: int, amplitude: float,
                          base: np.ndarray) -> np.ndarray:
    img = np.broadcast_to(base, (n, n, 3)).copy()
    # coarse blotches, bilinearly stretched from an 8x8 lattice
    coarse = rng.uniform(-amplitude, amplitude, size=(8, 8, 3))
    idx = np.linspace(0, 7, n)
    lo = np.minimum(np.floor(idx).astype(int), 6)
    w = (idx - lo)[:, None, None]
    rows = coarse[lo] * (1 - w) + coarse[lo + 1] * w
    w2 = (idx - lo)[None, :, None]
    img += rows[:, lo] * (1 - w2) + rows[:, lo + 1] * w2
    img += rng.uniform(-0.04, 0.04, size=(n, n, 3))
    return np.clip(img, 0.0, 1.0)


def _shape_color(spec: DatasetSpec, class_pos: int, bg_base: np.ndarray, rng) -> np.ndarray:
    """Fill color for one shape instance.

    The per-class base hue is blended with a free random color by
    palette_strength, then jittered; at strength 0 color carries no
    class information and identity rests on geometry alone.  Colors keep
    a margin from the background base so shapes stay visible.
    """
    base = spec.base_color(class_pos)
    strength = spec.palette_strength
    for _ in range(64):
        free = rng.uniform(0.05, 0.95, size=3)
        color = np.clip(
            strength * base
            + (1.0 - strength) * free
            + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3),
            0.0,
            1.0,
        )
        if np.max(np.abs(color - bg_base)) >= 0.25:
            return color
    # overwhelmingly unlikely; push the least distinct channel outward
    channel = int(np.argmin(np.abs(color - bg_base)))
    color[channel] = 0.05 if bg_base[channel] > 0.5 else 0.95
    return color


def _generate_one(spec: DatasetSpec, rng: np.random.Generator) -> SyntheticSample:
    n = spec.image_side
    bg_base = rng.uniform(spec.background_range[0], spec.background_range[1], size=3)
    img = _background_from_base(rng, n, spec.texture_amplitude, bg_base)
    mask = np.zeros((n, n), dtype=np.int64)
    lo_cnt, hi_cnt = spec.shapes_per_image
    count = int(rng.integers(lo_cnt, hi_cnt + 1)) if spec.classes else 0
    side_lo, side_hi = spec.shape_side_range()
    if count > 4:
        raise GenerationError(
            f"cannot fit {count} non-overlapping shapes; at most 4 per image"
        )
    # one quadrant slot per shape keeps placements disjoint by construction
    slots = rng.permutation(4)[:count]
    half_canvas = n / 2.0
    for slot in slots:
        class_pos = int(rng.integers(0, len(spec.classes)))
        kind = spec.classes[class_pos]
        side = float(rng.uniform(side_lo, side_hi))
        half = side / 2.0
        qr, qc = divmod(int(slot), 2)
        x_lo = qc * half_canvas + half + 1
        x_hi = (qc + 1) * half_canvas - half - 1
        y_lo = qr * half_canvas + half + 1
        y_hi = (qr + 1) * half_canvas - half - 1
        if x_hi <= x_lo or y_hi <= y_lo:
            raise GenerationError(
                f"a {kind} of side {side:.0f} does not fit a "
                f"{half_canvas:.0f}-pixel slot on a {n}x{n} canvas"
            )
        cx = float(rng.uniform(x_lo, x_hi))
        cy = float(rng.uniform(y_lo, y_hi))
        inside = _shape_mask(kind, n, cx, cy, side)
        color = _shape_color(spec, class_pos, bg_base, rng)
        img[inside] = color + rng.uniform(-0.02, 0.02, size=(int(inside.sum()), 3))
        img = np.clip(img, 0.0, 1.0)
        mask[inside] = class_pos + 1
    return SyntheticSample(image=img, mask=mask, labels=derive_labels(mask, spec.num_classes))


def generate(spec: DatasetSpec) -> list[SyntheticSample]:
    """Deterministic sample list; sample i depends only on (seed, i)."""
    samples = []
    for i in range(spec.num_images):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i)))
        samples.append(_generate_one(spec, rng))
    return samples


def augment(
    sample: SyntheticSample,
    seed: int,
    color_scale: float = 0.2,
    color_shift: float = 0.2,
    grayscale_p: float = 0.2,
    rotate_p: float = 0.5,
    hflip_p: float = 0.5,
    vflip_p: float = 0.5,
) -> SyntheticSample:
    """Color jitter, random grayscale, quarter rotation, and flips.

    Geometric operations hit the mask identically; labels are invariant.
    """
    rng = np.random.default_rng(seed)
    scale = rng.uniform(1.0 - color_scale, 1.0 + color_scale, size=3)
    shift = rng.uniform(-color_shift, color_shift, size=3)
    u_gray, u_rot, u_h, u_v = rng.uniform(size=4)

    img = np.clip(sample.image * scale + shift, 0.0, 1.0)
    if u_gray < grayscale_p:
        img = np.repeat(img.mean(axis=2, keepdims=True), 3, axis=2)
    mask = sample.mask
    if u_rot < rotate_p:
        img = np.rot90(img, 1, axes=(0, 1))
        mask = np.rot90(mask, 1, axes=(0, 1))
    if u_h < hflip_p:
        img = img[:, ::-1]
        mask = mask[:, ::-1]
    if u_v < vflip_p:
        img = img[::-1]
        mask = mask[::-1]
    return SyntheticSample(
        image=np.ascontiguousarray(img),
        mask=np.ascontiguousarray(mask),
        labels=sample.labels,
    )


def _mask_palette_image(mask: np.ndarray) -> Image.Image:
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    flat = []
    for rgb in MASK_PALETTE:
        flat.extend(rgb)
    im.putpalette(flat + [0] * (768 - len(flat)))
    return im


def save_dataset(samples, out_dir) -> None:
    """images/NNNN.png + masks/NNNN.png + manifest.jsonl."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as mf:
        for i, s in enumerate(samples):
            name = f"{i:04d}.png"
            rgb = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(out / "images" / name)
            _mask_palette_image(s.mask).save(out / "masks" / name)
            record = {
                "image": f"images/{name}",
                "mask": f"masks/{name}",
                "labels": [int(x) for x in s.labels.t],
            }
            mf.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(in_dir) -> list[SyntheticSample]:
    root = Path(in_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"missing manifest: {manifest}")
    samples = []
    problems = []
    with open(manifest, "r", encoding="utf-8") as mf:
        for line_no, line in enumerate(mf):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                img_path = root / rec["image"]
                mask_path = root / rec["mask"]
                img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
                mask = np.asarray(Image.open(mask_path), dtype=np.int64)
                labels = LabelVector(t=np.asarray(rec["labels"], dtype=np.int64))
                samples.append(SyntheticSample(image=img, mask=mask, labels=labels))
            except Exception as exc:  # report per sample, keep going
                problems.append(f"line {line_no}: {exc}")
    if problems:
        raise DataError("failed to load samples: " + "; ".join(problems))
    return samples
