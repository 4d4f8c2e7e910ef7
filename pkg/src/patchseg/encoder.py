"""Toy patch-transformer encoder.

Splits an image into non-overlapping square patches, embeds them
linearly, adds learned absolute positional embeddings, and runs a stack
of pre-norm transformer blocks.  Stands in for a large pretrained
backbone at desk scale; also provides a file-backed feature path so the
classifier head can be tested without the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ConfigError, NumericError, ShapeError
from .nn import (
    Param,
    TransformerBlock,
    bilinear_resize_grid,
    merge_heads,
    scaled_dot_attention,
    split_heads,
)
from .pcm_core import PatchFeatureGrid


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 64
    patch_side: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    seed: int = 0
    mlp_ratio: float = 2.0
    use_cls_token: bool = False

    def __post_init__(self):
        if self.image_side <= 0 or self.patch_side <= 0:
            raise ConfigError("image_side and patch_side must be positive")
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side**2


def validate_image(pixels: np.ndarray, side: int) -> np.ndarray:
    """Check an (side, side, 3) float image with values in [0, 1]."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.shape != (side, side, 3):
        raise ShapeError(f"expected image shape ({side}, {side}, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise NumericError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise NumericError("image values outside [0, 1]")
    return img


def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """(B, n, n, 3) -> (B, s, patch_side*patch_side*3), patches row-major."""
    b, n, n2, c = images.shape
    if n != n2 or n % patch_side != 0:
        raise ShapeError(f"cannot split {images.shape} into {patch_side}-pixel patches")
    g = n // patch_side
    x = images.reshape(b, g, patch_side, g, patch_side, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_side * patch_side * c)


def attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    num_heads: int = 1,
    w_out: np.ndarray | None = None,
    b_out: np.ndarray | None = None,
) -> np.ndarray:
    """Scaled dot-product attention on (S, E) matrices.

    Splits into ``num_heads`` heads, attends per head, concatenates, and
    applies the optional output projection.
    """
    q, k, v = (np.asarray(m, dtype=np.float64) for m in (queries, keys, values))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects rank-2 q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    if q.shape[1] % num_heads != 0 or v.shape[1] % num_heads != 0:
        raise ShapeError(f"dims {q.shape[1]}/{v.shape[1]} not divisible by {num_heads} heads")
    qh = split_heads(q[None], num_heads)
    kh = split_heads(k[None], num_heads)
    vh = split_heads(v[None], num_heads)
    ctx, _ = scaled_dot_attention(qh, kh, vh)
    out = merge_heads(ctx)[0]
    if w_out is not None:
        out = out @ w_out
        if b_out is not None:
            out = out + b_out
    return out


class PatchEncoder:
    """Patch embedding + positional embedding + transformer blocks."""

    def __init__(self, config: EncoderConfig, seed: int | None = None, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed if seed is None else seed)
        e = config.embed_dim
        patch_dim = config.patch_side**2 * 3
        self.embed_w = Param(
            rng.normal(0.0, 1.0, (patch_dim, e)) / np.sqrt(patch_dim), dtype=dtype
        )
        self.embed_b = Param(np.zeros(e), dtype=dtype)
        self.pos = Param(rng.normal(0.0, 0.02, (config.num_patches, e)), dtype=dtype)
        self.cls = (
            Param(rng.normal(0.0, 0.02, (e,)), dtype=dtype) if config.use_cls_token else None
        )
        hidden = int(round(config.mlp_ratio * e))
        self.blocks = [
            TransformerBlock(rng, e, config.num_heads, hidden, dtype=dtype)
            for _ in range(config.depth)
        ]

    def params(self, prefix: str = "encoder") -> dict:
        out = {f"{prefix}.embed.w": self.embed_w, f"{prefix}.embed.b": self.embed_b,
               f"{prefix}.pos": self.pos}
        if self.cls is not None:
            out[f"{prefix}.cls"] = self.cls
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.block{i}"))
        return out

    def positional_grid(self, upscale: int = 1) -> np.ndarray:
        """Positional embeddings as an (ug, ug, e) grid, interpolated
        bilinearly when inference runs on an upscaled input."""
        g = self.config.grid_side
        grid = self.pos.value.reshape(g, g, self.config.embed_dim)
        return bilinear_resize_grid(grid, g * upscale)

    def forward(self, images: np.ndarray, upscale: int = 1) -> np.ndarray:
        """(B, u*n, u*n, 3) -> (B, (u*g)^2, e) patch features."""
        cfg = self.config
        side = cfg.image_side * upscale
        if images.ndim != 4 or images.shape[1:] != (side, side, 3):
            raise ShapeError(
                f"expected images (B, {side}, {side}, 3), got {images.shape}"
            )
        images = np.ascontiguousarray(images, dtype=self.dtype)
        tokens = patchify(images, cfg.patch_side)
        x = tokens @ self.embed_w.value + self.embed_b.value
        pos = self.positional_grid(upscale).reshape(-1, cfg.embed_dim)
        x = x + pos
        if self.cls is not None:
            cls_row = np.broadcast_to(self.cls.value, (x.shape[0], 1, cfg.embed_dim))
            x = np.concatenate([x, cls_row], axis=1)
        for blk in self.blocks:
            x = blk.forward(x)
        if self.cls is not None:
            x = x[:, :-1]
        return x

    def backward(self, d_feats: np.ndarray, num_unfrozen_blocks: int):
        """Backpropagate into the last ``num_unfrozen_blocks`` blocks.

        Earlier blocks and the embeddings stay frozen, so propagation
        stops once the trailing trainable blocks are done.
        """
        if num_unfrozen_blocks <= 0:
            return
        d = d_feats
        if self.cls is not None:
            d = np.concatenate([d, np.zeros_like(d[:, :1])], axis=1)
        stop = max(0, len(self.blocks) - num_unfrozen_blocks)
        for idx in range(len(self.blocks) - 1, stop - 1, -1):
            d = self.blocks[idx].backward(d)


def encode(image, config: EncoderConfig, params: PatchEncoder | None = None) -> PatchFeatureGrid:
    """Encode one image into its per-patch feature grid.

    ``params`` is an already-initialized :class:`PatchEncoder`; when
    omitted a fresh one is built from ``config.seed``.
    """
    enc = params if params is not None else PatchEncoder(config)
    img = validate_image(image, config.image_side)
    feats = enc.forward(img[None])[0]
    return PatchFeatureGrid(values=feats, grid_side=config.grid_side)


def save_features(path, features: PatchFeatureGrid) -> None:
    container.save_arrays(
        path,
        {
            "features": features.values,
            "grid_side": np.array([features.grid_side], dtype=np.int64),
        },
    )


def load_features(path) -> PatchFeatureGrid:
    values = container.load_matrix(path, "features")
    arrays = container.load_arrays(path)
    if "grid_side" in arrays:
        grid_side = int(arrays["grid_side"][0])
    else:
        grid_side = int(round(np.sqrt(values.shape[0])))
    return PatchFeatureGrid(values=values, grid_side=grid_side)
