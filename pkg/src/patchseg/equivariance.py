"""Two-branch equivariant regularization.

The transform group is restricted to quarter-turn rotations, axis flips,
and cyclic whole-patch translations so every element has an exact
inverse on both the pixel lattice and the patch grid; no interpolation
is involved anywhere.  Scaling enters only through the four-image merge
branch, which tiles half-scale images and therefore re-patches them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .pcm_core import BCE_EPS, pooled_bce_flat

_ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class GridTransform:
    """Rotation, flips, and a cyclic pixel shift whose offsets must be
    whole patches."""

    rotation: int = 0
    hflip: bool = False
    vflip: bool = False
    shift: tuple[int, int] = (0, 0)  # (dx, dy) pixels, multiples of patch_side

    def __post_init__(self):
        if self.rotation not in _ROTATIONS:
            raise ConfigError(f"rotation must be one of {_ROTATIONS}, got {self.rotation}")
        if len(self.shift) != 2:
            raise ConfigError(f"shift must be (dx, dy), got {self.shift!r}")

    def patch_offsets(self, patch_side: int) -> tuple[int, int]:
        dx, dy = self.shift
        if dx % patch_side or dy % patch_side:
            raise ConfigError(
                f"shift {self.shift} is not a multiple of the patch side {patch_side}"
            )
        return dx // patch_side, dy // patch_side


def _apply(arr: np.ndarray, t: GridTransform, dx: int, dy: int) -> np.ndarray:
    out = np.rot90(arr, t.rotation // 90, axes=(0, 1))
    if t.hflip:
        out = out[:, ::-1]
    if t.vflip:
        out = out[::-1]
    return np.roll(out, shift=(dy, dx), axis=(0, 1))


def _apply_inverse(arr: np.ndarray, t: GridTransform, dx: int, dy: int) -> np.ndarray:
    out = np.roll(arr, shift=(-dy, -dx), axis=(0, 1))
    if t.vflip:
        out = out[::-1]
    if t.hflip:
        out = out[:, ::-1]
    return np.rot90(out, -(t.rotation // 90), axes=(0, 1))


def apply_transform(image: np.ndarray, t: GridTransform, patch_side: int) -> np.ndarray:
    """Rotate, flip, and cyclically shift an image; exactly invertible."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"expected square (n, n, c) image, got {image.shape}")
    dx, dy = t.shift
    if dx % patch_side or dy % patch_side:
        raise ConfigError(f"shift {t.shift} is not a multiple of the patch side {patch_side}")
    return np.ascontiguousarray(_apply(image, t, dx, dy))


def apply_inverse_transform(image: np.ndarray, t: GridTransform, patch_side: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    dx, dy = t.shift
    if dx % patch_side or dy % patch_side:
        raise ConfigError(f"shift {t.shift} is not a multiple of the patch side {patch_side}")
    return np.ascontiguousarray(_apply_inverse(image, t, dx, dy))


def apply_on_grid(grid: np.ndarray, t: GridTransform, patch_side: int) -> np.ndarray:
    """Permute the cells of a (g, g, ...) grid by the transform; cell
    contents untouched."""
    grid = np.asarray(grid)
    if grid.ndim < 2 or grid.shape[0] != grid.shape[1]:
        raise ShapeError(f"expected square (g, g, ...) grid, got {grid.shape}")
    dx, dy = t.patch_offsets(patch_side)
    return np.ascontiguousarray(_apply(grid, t, dx, dy))


def apply_inverse_on_grid(grid: np.ndarray, t: GridTransform, patch_side: int) -> np.ndarray:
    """Permute grid cells by the inverse transform."""
    grid = np.asarray(grid)
    if grid.ndim < 2 or grid.shape[0] != grid.shape[1]:
        raise ShapeError(f"expected square (g, g, ...) grid, got {grid.shape}")
    dx, dy = t.patch_offsets(patch_side)
    return np.ascontiguousarray(_apply_inverse(grid, t, dx, dy))


@dataclass(frozen=True)
class MergedBatch:
    """Four half-scale images tiled row-major into one full-size image."""

    image: np.ndarray
    source_ids: tuple[int, int, int, int]


def box_downscale_half(image: np.ndarray) -> np.ndarray:
    """2x2 box average, halving each spatial side."""
    n = image.shape[0]
    if n % 2:
        raise ShapeError(f"side {n} is odd; cannot box-average by 2")
    return image.reshape(n // 2, 2, n // 2, 2, image.shape[2]).mean(axis=(1, 3))


def merge_four(images, patch_side: int, source_ids=(0, 1, 2, 3)) -> MergedBatch:
    """Downscale four images x1/2 and tile them 2x2 in row-major order."""
    if len(images) != 4:
        raise ConfigError(f"merge needs exactly 4 images, got {len(images)}")
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    n = arrs[0].shape[0]
    for a in arrs:
        if a.shape != arrs[0].shape or a.ndim != 3 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"merge inputs must share a square shape, got {a.shape}")
    if n % (2 * patch_side) != 0:
        raise ConfigError(
            f"image side {n} not divisible by twice the patch side {patch_side}"
        )
    half = n // 2
    merged = np.empty_like(arrs[0])
    slots = ((0, 0), (0, 1), (1, 0), (1, 1))
    for a, (r, c) in zip(arrs, slots):
        merged[r * half : (r + 1) * half, c * half : (c + 1) * half] = box_downscale_half(a)
    return MergedBatch(image=merged, source_ids=tuple(source_ids))


def inverse_merge(grid: np.ndarray) -> list[np.ndarray]:
    """Split a (g, g, ...) grid into quadrants and upscale each x2 by
    nearest neighbor, recovering one full-size grid per merged source."""
    grid = np.asarray(grid)
    g = grid.shape[0]
    if grid.ndim < 2 or grid.shape[1] != g:
        raise ShapeError(f"expected square grid, got {grid.shape}")
    if g % 2:
        raise ShapeError(f"grid side {g} is odd; quadrants undefined")
    half = g // 2
    out = []
    for r, c in ((0, 0), (0, 1), (1, 0), (1, 1)):
        quad = grid[r * half : (r + 1) * half, c * half : (c + 1) * half]
        out.append(np.repeat(np.repeat(quad, 2, axis=0), 2, axis=1))
    return out


def _check_cellwise_stochastic(grid: np.ndarray, name: str):
    if grid.ndim != 3:
        raise ShapeError(f"{name} must be (g, g, K), got {grid.shape}")
    if np.any(grid < -1e-12) or np.any(grid > 1.0 + 1e-12):
        raise NumericError(f"{name} entries outside [0, 1]")
    sums = grid.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise NumericError(f"{name} cells are not stochastic over classes")


def et_loss(mu: np.ndarray, nu: np.ndarray) -> float:
    """Cross-entropy between aligned per-cell class distributions,
    averaged over the grid cells; ``nu`` is the (detached) target."""
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if mu.shape != nu.shape:
        raise ShapeError(f"branch grids differ: {mu.shape} vs {nu.shape}")
    _check_cellwise_stochastic(mu, "mu")
    _check_cellwise_stochastic(nu, "nu")
    cells = mu.shape[0] * mu.shape[1]
    return float(-np.sum(nu * np.log(np.maximum(mu, BCE_EPS))) / cells)


def et_loss_grad(mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """d et_loss / d mu; zero where the clamp is active."""
    cells = mu.shape[0] * mu.shape[1]
    grad = -nu / np.maximum(mu, BCE_EPS) / cells
    grad[mu < BCE_EPS] = 0.0
    return grad


def two_branch_step(
    images: np.ndarray,
    labels: np.ndarray,
    model,
    branch1_transforms,
    branch2_transforms,
    patch_side: int,
    backward: bool = False,
):
    """One optimization step of the two-branch objective.

    Branch 1 forwards each transformed image and inverse-transforms the
    resulting distribution grid (mu).  Branch 2 merges each group of
    four half-scale images, transforms, forwards, inverse-transforms,
    and inverse-merges into one soft target grid (nu) per source image;
    nu is a detached target, so branch 2 never needs gradients and runs
    before branch 1 to keep the model caches valid for the backward
    pass.

    Returns (mce, et, total); with ``backward=True`` parameter gradients
    of the total are accumulated into the model.
    """
    b = images.shape[0]
    if b % 4 != 0:
        raise ConfigError(f"batch size {b} is not divisible by 4")
    if len(branch1_transforms) != b:
        raise ConfigError("need one branch-1 transform per image")
    if len(branch2_transforms) != b // 4:
        raise ConfigError("need one branch-2 transform per image quadruple")
    labels = np.asarray(labels, dtype=np.float64)
    k = labels.shape[1]

    # Branch 2: merged, gradient-free.
    merged = []
    for j in range(b // 4):
        group = [images[4 * j + i] for i in range(4)]
        mb = merge_four(group, patch_side, source_ids=tuple(range(4 * j, 4 * j + 4)))
        merged.append(apply_transform(mb.image, branch2_transforms[j], patch_side))
    z2 = model.forward_grids(np.stack(merged))
    nu = []
    for j in range(b // 4):
        aligned = apply_inverse_on_grid(z2[j], branch2_transforms[j], patch_side)
        nu.extend(inverse_merge(aligned))

    # Branch 1: transformed originals; caches kept for backward.
    t_images = np.stack(
        [apply_transform(images[i], branch1_transforms[i], patch_side) for i in range(b)]
    )
    z1 = model.forward_grids(t_images)
    g = z1.shape[1]
    mu = [apply_inverse_on_grid(z1[i], branch1_transforms[i], patch_side) for i in range(b)]

    mce_total = 0.0
    et_total = 0.0
    d_z1 = np.zeros_like(z1) if backward else None
    for i in range(b):
        z_flat = z1[i].reshape(g * g, k)
        loss_i, idx, d_y, _ = pooled_bce_flat(z_flat, labels[i])
        mce_total += loss_i
        et_total += et_loss(mu[i], nu[i])
        if backward:
            d_flat = np.zeros_like(z_flat)
            d_flat[idx, np.arange(k)] = d_y / b
            d_z1[i] += d_flat.reshape(g, g, k)
            d_mu = et_loss_grad(mu[i], nu[i]) / b
            d_z1[i] += apply_on_grid(d_mu, branch1_transforms[i], patch_side)

    mce = mce_total / b
    et = et_total / b
    if backward:
        model.backward_grids(d_z1)
    return mce, et, mce + et
