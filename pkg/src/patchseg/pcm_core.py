"""Patch-class mapping head.

Projects per-patch features to class logits, normalizes them into a
per-patch categorical distribution, max-pools each class column into an
image-level prediction, scores it with a mean of per-class binary
cross-entropies, and exposes the closed-form gradient of that composed
loss with respect to the projection weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

BCE_EPS = 1e-7


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class PatchFeatureGrid:
    """Per-patch feature vectors; row j is the feature of patch j on a
    row-major grid_side x grid_side grid."""

    values: np.ndarray
    grid_side: int

    def __post_init__(self):
        values = _as_f64(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ShapeError(f"feature grid must be rank 2, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("feature grid contains non-finite entries")
        s = values.shape[0]
        if s != self.grid_side * self.grid_side:
            raise ShapeError(
                f"patch count {s} is not grid_side**2 = {self.grid_side ** 2}"
            )

    @property
    def num_patches(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClassWeights:
    """Trainable projection from feature space to K class logits
    (column k scores class k; class 0 is background)."""

    values: np.ndarray

    def __post_init__(self):
        values = _as_f64(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ShapeError(f"class weights must be rank 2, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("class weights contain non-finite entries")
        if values.shape[1] < 2:
            raise ShapeError(f"need at least 2 classes, got {values.shape[1]}")

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchClassDistribution:
    """Row-stochastic s x K matrix of per-patch class probabilities,
    with the logits it was computed from."""

    values: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        values = _as_f64(self.values)
        logits = _as_f64(self.logits)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "logits", logits)
        if values.shape != logits.shape or values.ndim != 2:
            raise ShapeError(
                f"distribution shape {values.shape} does not match logits {logits.shape}"
            )
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise NumericError("distribution entries outside [0, 1]")
        row_sums = values.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-6):
            worst = float(np.max(np.abs(row_sums - 1.0)))
            raise NumericError(f"rows not stochastic: max |sum - 1| = {worst:.3e}")

    @property
    def num_patches(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ImagePrediction:
    """Image-level class probabilities y and the patch index that
    attained each class maximum."""

    y: np.ndarray
    argmax_index: np.ndarray

    def __post_init__(self):
        y = _as_f64(self.y)
        idx = np.asarray(self.argmax_index, dtype=np.int64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "argmax_index", idx)
        if y.ndim != 1 or idx.shape != y.shape:
            raise ShapeError(
                f"prediction y shape {y.shape} and index shape {idx.shape} must match rank 1"
            )
        if np.any(y <= 0.0) or np.any(y >= 1.0):
            raise NumericError("prediction probabilities must lie strictly in (0, 1)")


@dataclass(frozen=True)
class LabelVector:
    """Binary image-level labels; index 0 is background and must be 1
    during training."""

    t: np.ndarray
    require_background: bool = field(default=True)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        object.__setattr__(self, "t", t)
        if t.ndim != 1:
            raise ShapeError(f"label vector must be rank 1, got shape {t.shape}")
        if not np.all((t == 0) | (t == 1)):
            raise NumericError("label entries must be 0 or 1")
        if self.require_background and t[0] != 1:
            raise NumericError("background label (index 0) must be 1")

    @property
    def num_classes(self) -> int:
        return self.t.shape[0]


def patch_logits(features: PatchFeatureGrid, weights: ClassWeights) -> np.ndarray:
    """Per-patch class logits: row j of the result is F_j . W, one score
    per class column."""
    f = features.values
    w = weights.values
    if f.shape[1] != w.shape[0]:
        raise ShapeError(
            f"feature dim {f.shape} incompatible with weight shape {w.shape}"
        )
    return f @ w


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    a = _as_f64(a)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def patch_distribution(logits: np.ndarray) -> PatchClassDistribution:
    """Normalize each patch's logits into a categorical distribution
    over classes."""
    a = _as_f64(logits)
    if a.ndim != 2:
        raise ShapeError(f"logits must be rank 2, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("logits contain non-finite entries")
    return PatchClassDistribution(values=softmax_rows(a), logits=a)


def gmp(dist: PatchClassDistribution) -> ImagePrediction:
    """Global max pooling: per class, the highest patch probability and
    the lowest patch index attaining it."""
    z = dist.values
    idx = np.argmax(z, axis=0)  # np.argmax returns the first (lowest) maximizer
    y = z[idx, np.arange(z.shape[1])]
    return ImagePrediction(y=y, argmax_index=idx)


def mce_loss(pred: ImagePrediction, labels: LabelVector) -> float:
    """Mean over classes of binary cross-entropy between the image-level
    prediction and the binary labels."""
    y = pred.y
    t = labels.t.astype(np.float64)
    if y.shape != t.shape:
        raise ShapeError(f"prediction length {y.shape} != label length {t.shape}")
    yc = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
    if np.any(~np.isfinite(yc)) or np.any(yc <= 0.0) or np.any(yc >= 1.0):
        raise NumericError("prediction probabilities invalid after clamping")
    k = y.shape[0]
    return float(-np.sum(t * np.log(yc) + (1.0 - t) * np.log(1.0 - yc)) / k)


def mce_grad_analytic(
    features: PatchFeatureGrid,
    dist: PatchClassDistribution,
    pred: ImagePrediction,
    labels: LabelVector,
) -> np.ndarray:
    """Closed-form gradient of the composed max-pooled BCE loss w.r.t.
    the class-weight matrix.

    Column h is
        (1/K) * [ -F[i_h] (t_h - y_h)
                  + sum_{k != h} F[i_k] Z[i_k, h] (t_k - y_k) / (1 - y_k) ]
    where i_k is the patch selected by max pooling for class k.  Only
    the selected patch rows contribute.  Exact when no class column has
    a tie at its maximum.
    """
    f = features.values
    z = dist.values
    y = pred.y
    idx = pred.argmax_index
    t = labels.t.astype(np.float64)
    k = y.shape[0]
    if z.shape != (f.shape[0], k):
        raise ShapeError(
            f"distribution shape {z.shape} inconsistent with features {f.shape} and {k} classes"
        )
    saturated = np.nonzero(y >= 1.0)[0]
    if saturated.size:
        raise NumericError(
            f"prediction for class {int(saturated[0])} equals 1; gradient undefined"
        )

    fi = f[idx]  # (K, e) selected patch features
    zi = z[idx]  # (K, K) row k = distribution of the patch selected for class k
    resid = (t - y) / (1.0 - y)  # (K,)

    # Off-diagonal accumulation over all k, then remove the k == h term.
    full = fi.T @ (zi * resid[:, None])  # (e, K)
    diag_extra = fi * (y * resid)[:, None]  # row h = F[i_h] * Z[i_h, h] * resid_h
    grad = -fi.T * (t - y)[None, :] + full - diag_extra.T
    return grad / k


def pooled_bce_flat(z_flat: np.ndarray, t: np.ndarray):
    """Training-path helper on a raw (s, K) distribution: max-pooled BCE
    loss, the pooled patch indices, d loss/d y (clamp-through), and y."""
    k = z_flat.shape[1]
    idx = np.argmax(z_flat, axis=0)
    y = z_flat[idx, np.arange(k)]
    yc = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
    loss = float(-np.sum(t * np.log(yc) + (1.0 - t) * np.log(1.0 - yc)) / k)
    d_y = (yc - t) / (yc * (1.0 - yc)) / k
    return loss, idx, d_y, y


def pseudo_mask(dist: PatchClassDistribution, grid_side: int) -> np.ndarray:
    """Per-patch argmax over classes, reshaped to a grid_side x grid_side
    category grid (ties go to the lowest class index)."""
    z = dist.values
    s = z.shape[0]
    if s != grid_side * grid_side:
        raise ShapeError(f"{s} patches do not form a {grid_side}x{grid_side} grid")
    return np.argmax(z, axis=1).reshape(grid_side, grid_side)
