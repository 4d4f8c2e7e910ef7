"""Full segmentation model: patch encoder, optional grid conditioning,
and the class-projection head, with a shared backward pass."""
from __future__ import annotations

import numpy as np

from .conditioning import HVBiLSTM
from .encoder import EncoderConfig, PatchEncoder
from .errors import ConfigError, ShapeError
from .nn import Param, softmax_last, softmax_last_backward, zero_grads


class SegModel:
    """Patch features -> (optional conditioning) -> per-patch class
    distribution grid."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        num_classes: int,
        use_conditioning: bool = True,
        seed: int = 0,
        dtype=np.float32,
    ):
        if num_classes < 2:
            raise ConfigError("need at least background + 1 class")
        self.encoder_config = encoder_config
        self.num_classes = num_classes
        self.use_conditioning = use_conditioning
        self.dtype = dtype
        ss = np.random.SeedSequence([seed, encoder_config.seed])
        enc_seed, cond_seed, head_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        self.encoder = PatchEncoder(encoder_config, seed=enc_seed, dtype=dtype)
        e = encoder_config.embed_dim
        self.conditioner = (
            HVBiLSTM(np.random.default_rng(cond_seed), e, dtype=dtype)
            if use_conditioning
            else None
        )
        self.head_dim = 2 * e if use_conditioning else e
        head_rng = np.random.default_rng(head_seed)
        # standard Gaussian head, scaled by 1/sqrt(fan_in) for stability
        self.head_w = Param(
            head_rng.normal(0.0, 1.0, (self.head_dim, num_classes)) / np.sqrt(self.head_dim),
            dtype=dtype,
        )
        self.num_unfrozen_blocks = 0
        self._cache = None

    # -- parameter plumbing -------------------------------------------------
    def params(self) -> dict:
        out = self.encoder.params("encoder")
        if self.conditioner is not None:
            out.update(self.conditioner.params("cond"))
        out["head.w"] = self.head_w
        return out

    def set_trainable_phase(self, unfrozen_blocks: int):
        """Phase 1 uses 0 unfrozen blocks; phase 2 unfreezes the tail."""
        self.num_unfrozen_blocks = min(unfrozen_blocks, len(self.encoder.blocks))
        cut = len(self.encoder.blocks) - self.num_unfrozen_blocks
        for name, p in self.params().items():
            if name.startswith("encoder."):
                trainable = False
                if name.startswith("encoder.block"):
                    idx = int(name.split(".")[1][len("block"):])
                    trainable = idx >= cut
                p.trainable = trainable
            else:
                p.trainable = True

    def trainable_params(self) -> dict:
        return {k: p for k, p in self.params().items() if p.trainable}

    def zero_grads(self):
        zero_grads(self.params())

    # -- forward / backward --------------------------------------------------
    def forward_grids(self, images: np.ndarray, upscale: int = 1) -> np.ndarray:
        """(B, u*n, u*n, 3) -> (B, u*g, u*g, K) per-patch distributions."""
        feats = self.encoder.forward(images, upscale=upscale)
        b, s, e = feats.shape
        g = self.encoder_config.grid_side * upscale
        if self.conditioner is not None:
            grid = feats.reshape(b, g, g, e)
            head_in = self.conditioner.forward(grid).reshape(b, s, self.head_dim)
        else:
            head_in = feats
        logits = head_in @ self.head_w.value
        z = softmax_last(logits)
        self._cache = (head_in, z, g)
        return z.reshape(b, g, g, self.num_classes)

    def backward_grids(self, d_z_grids: np.ndarray):
        """Accumulate gradients of a scalar loss given d loss / d Z."""
        if self._cache is None:
            raise ShapeError("backward called before forward")
        head_in, z, g = self._cache
        b, s, _ = head_in.shape
        d_z = d_z_grids.reshape(b, s, self.num_classes)
        d_logits = softmax_last_backward(z, d_z)
        self.head_w.grad += np.einsum("bse,bsk->ek", head_in, d_logits)
        d_head_in = d_logits @ self.head_w.value.T
        if self.conditioner is not None:
            d_grid = self.conditioner.backward(d_head_in.reshape(b, g, g, -1))
            d_feats = d_grid.reshape(b, s, -1)
        else:
            d_feats = d_head_in
        self.encoder.backward(d_feats, self.num_unfrozen_blocks)

    # -- persistence ----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ShapeError(f"checkpoint missing parameters: {missing[:4]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeError(
                    f"parameter {name} has shape {arr.shape}, expected {p.value.shape}"
                )
            p.value[...] = arr


class CamModel:
    """Baseline classifier: encoder features, global average pooling,
    and a linear multi-label head over the foreground classes."""

    def __init__(self, encoder_config: EncoderConfig, num_classes: int, seed: int = 0,
                 dtype=np.float32):
        if num_classes < 2:
            raise ConfigError("need at least background + 1 class")
        self.encoder_config = encoder_config
        self.num_classes = num_classes
        self.num_foreground = num_classes - 1
        self.dtype = dtype
        ss = np.random.SeedSequence([seed, encoder_config.seed, 1])
        enc_seed, head_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        self.encoder = PatchEncoder(encoder_config, seed=enc_seed, dtype=dtype)
        e = encoder_config.embed_dim
        rng = np.random.default_rng(head_seed)
        self.head_w = Param(rng.normal(0.0, 1.0, (e, self.num_foreground)) / np.sqrt(e),
                            dtype=dtype)
        self.head_b = Param(np.zeros(self.num_foreground), dtype=dtype)
        self.num_unfrozen_blocks = 0
        self._cache = None

    def params(self) -> dict:
        out = self.encoder.params("encoder")
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def set_trainable_phase(self, unfrozen_blocks: int):
        self.num_unfrozen_blocks = min(unfrozen_blocks, len(self.encoder.blocks))
        cut = len(self.encoder.blocks) - self.num_unfrozen_blocks
        for name, p in self.params().items():
            if name.startswith("encoder."):
                trainable = False
                if name.startswith("encoder.block"):
                    idx = int(name.split(".")[1][len("block"):])
                    trainable = idx >= cut
                p.trainable = trainable
            else:
                p.trainable = True

    def trainable_params(self) -> dict:
        return {k: p for k, p in self.params().items() if p.trainable}

    def zero_grads(self):
        zero_grads(self.params())

    def forward(self, images: np.ndarray, upscale: int = 1):
        """Returns (image logits (B, K-1), patch scores (B, s, K-1))."""
        feats = self.encoder.forward(images, upscale=upscale)
        pooled = feats.mean(axis=1)
        logits = pooled @ self.head_w.value + self.head_b.value
        scores = feats @ self.head_w.value
        self._cache = (feats, pooled)
        return logits, scores

    def backward(self, d_logits: np.ndarray):
        feats, pooled = self._cache
        self.head_w.grad += pooled.T @ d_logits
        self.head_b.grad += d_logits.sum(axis=0)
        d_pooled = d_logits @ self.head_w.value.T
        d_feats = np.broadcast_to(
            d_pooled[:, None, :] / feats.shape[1], feats.shape
        ).copy()
        self.encoder.backward(d_feats, self.num_unfrozen_blocks)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        for name, p in params.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint missing parameter {name}")
            p.value[...] = np.asarray(arrays[name], dtype=np.float64).reshape(p.value.shape)
