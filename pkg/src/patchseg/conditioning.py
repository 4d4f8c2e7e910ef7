"""Grid conditioning with horizontal and vertical bidirectional
recurrent scans.

Each patch row of the feature grid is scanned left-to-right and
right-to-left, each column top-to-bottom and bottom-to-top.  The two
scans run in parallel on the raw features and their outputs are
concatenated, so every patch sees its full row and column context.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .nn import BiLSTM


@dataclass(frozen=True)
class ConditionedGrid:
    """g x g x 2e grid: first e channels from the row scan, last e from
    the column scan."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 3 or values.shape[0] != values.shape[1]:
            raise ShapeError(f"conditioned grid must be (g, g, c), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("conditioned grid contains non-finite entries")


class HVBiLSTM:
    """Row-wise and column-wise bidirectional recurrences over a feature
    grid, hidden size e/2 per direction so the concatenated output has
    2e channels."""

    def __init__(self, rng: np.random.Generator, feature_dim: int, dtype=np.float64):
        if feature_dim % 2 != 0:
            raise ConfigError(
                f"feature dim {feature_dim} is odd; cannot split the recurrent hidden state"
            )
        self.feature_dim = feature_dim
        self.h_scan = BiLSTM(rng, feature_dim, feature_dim // 2, dtype=dtype,
                             passthrough_bias=True)
        self.v_scan = BiLSTM(rng, feature_dim, feature_dim // 2, dtype=dtype,
                             passthrough_bias=True)
        self._grid_shape = None

    def params(self, prefix: str = "cond") -> dict:
        out = self.h_scan.params(f"{prefix}.h")
        out.update(self.v_scan.params(f"{prefix}.v"))
        return out

    def forward(self, grid: np.ndarray) -> np.ndarray:
        """(B, g, g, e) -> (B, g, g, 2e)"""
        b, g, g2, e = grid.shape
        if g != g2 or e != self.feature_dim:
            raise ShapeError(f"expected (B, g, g, {self.feature_dim}) grid, got {grid.shape}")
        self._grid_shape = grid.shape
        rows = grid.reshape(b * g, g, e)
        h_out = self.h_scan.forward(rows).reshape(b, g, g, e)
        cols = grid.transpose(0, 2, 1, 3).reshape(b * g, g, e)
        v_out = self.v_scan.forward(cols).reshape(b, g, g, e).transpose(0, 2, 1, 3)
        return np.concatenate([h_out, v_out], axis=-1)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        b, g, _, e = self._grid_shape
        d_h = d_out[..., :e].reshape(b * g, g, e)
        d_grid = self.h_scan.backward(d_h).reshape(b, g, g, e)
        d_v = d_out[..., e:].transpose(0, 2, 1, 3).reshape(b * g, g, e)
        d_grid_v = self.v_scan.backward(d_v).reshape(b, g, g, e).transpose(0, 2, 1, 3)
        return d_grid + d_grid_v


def condition(grid: np.ndarray, module: HVBiLSTM) -> ConditionedGrid:
    """Condition a single (g, g, e) feature grid on its rows and columns."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ShapeError(f"expected (g, g, e) grid, got {grid.shape}")
    out = module.forward(grid[None])[0]
    return ConditionedGrid(values=out)
