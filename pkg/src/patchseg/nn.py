"""Minimal dense-layer toolkit with explicit forward/backward passes.

Every layer caches what its backward pass needs on the instance, so the
calling convention is: forward once, then backward against that same
forward.  When a step runs several forwards (e.g. a gradient-free
auxiliary branch), the gradient-free ones must run first.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError

_GELU_C = float(np.sqrt(2.0 / np.pi))


class Param:
    """A trainable array with its gradient accumulator."""

    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value: np.ndarray, trainable: bool = True, dtype=np.float64):
        self.value = np.asarray(value, dtype=dtype)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0


def gaussian_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Zero-mean Gaussian scaled by 1/sqrt(fan_in)."""
    return rng.normal(0.0, 1.0, size=shape) / np.sqrt(float(fan_in))


def softmax_last(a: np.ndarray) -> np.ndarray:
    out = a - a.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def softmax_last_backward(out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Backward of softmax over the last axis given its output."""
    inner = np.sum(d_out * out, axis=-1, keepdims=True)
    return out * (d_out - inner)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return d_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # clipping keeps exp in range; sigmoid saturates far before +-40
    out = np.clip(x, -40.0, 40.0)
    np.negative(out, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


class Linear:
    """y = x @ w + b over the last axis."""

    def __init__(self, rng: np.random.Generator, dim_in: int, dim_out: int, dtype=np.float64):
        self.w = Param(gaussian_init(rng, (dim_in, dim_out), dim_in), dtype=dtype)
        self.b = Param(np.zeros(dim_out), dtype=dtype)
        self._x = None

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self._x.shape[-1])
        d2 = d_out.reshape(-1, d_out.shape[-1])
        self.w.grad += x2.T @ d2
        self.b.grad += d2.sum(axis=0)
        return d_out @ self.w.value.T


class LayerNorm:
    """Normalization over the last axis with learned scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float64):
        self.gamma = Param(np.ones(dim), dtype=dtype)
        self.beta = Param(np.zeros(dim), dtype=dtype)
        self.eps = eps
        self._xhat = None
        self._inv_std = None

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._xhat = xhat
        self._inv_std = inv_std
        return self.gamma.value * xhat + self.beta.value

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        xhat = self._xhat
        flat_d = d_out.reshape(-1, d_out.shape[-1])
        flat_x = xhat.reshape(-1, xhat.shape[-1])
        self.gamma.grad += (flat_d * flat_x).sum(axis=0)
        self.beta.grad += flat_d.sum(axis=0)
        d_xhat = d_out * self.gamma.value
        mean_d = d_xhat.mean(axis=-1, keepdims=True)
        mean_dx = (d_xhat * xhat).mean(axis=-1, keepdims=True)
        return self._inv_std * (d_xhat - mean_d - xhat * mean_dx)


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """(B, S, E) -> (B, H, S, E/H)"""
    b, s, e = x.shape
    return x.reshape(b, s, num_heads, e // num_heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(B, H, S, D) -> (B, S, H*D)"""
    b, h, s, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * d)


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """softmax(q k^T / sqrt(d)) v on (..., S, D) stacks. Returns (out, attn)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    attn = softmax_last(scores)
    return attn @ v, attn


class MultiHeadSelfAttention:
    """Per-token q/k/v projections, per-head scaled dot-product, output
    projection."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, dtype=np.float64):
        if dim % num_heads != 0:
            raise ConfigError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.wq = Linear(rng, dim, dim, dtype=dtype)
        self.wk = Linear(rng, dim, dim, dtype=dtype)
        self.wv = Linear(rng, dim, dim, dtype=dtype)
        self.wo = Linear(rng, dim, dim, dtype=dtype)
        self._cache = None

    def params(self, prefix: str) -> dict:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.num_heads
        q = split_heads(self.wq.forward(x), h)
        k = split_heads(self.wk.forward(x), h)
        v = split_heads(self.wv.forward(x), h)
        ctx, attn = scaled_dot_attention(q, k, v)
        self._cache = (q, k, v, attn)
        return self.wo.forward(merge_heads(ctx))

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        q, k, v, attn = self._cache
        h = self.num_heads
        d_ctx = split_heads(self.wo.backward(d_out), h)
        d_attn = d_ctx @ np.swapaxes(v, -1, -2)
        d_v = np.swapaxes(attn, -1, -2) @ d_ctx
        d_scores = softmax_last_backward(attn, d_attn) / float(np.sqrt(q.shape[-1]))
        d_q = d_scores @ k
        d_k = np.swapaxes(d_scores, -1, -2) @ q
        d_x = self.wq.backward(merge_heads(d_q))
        d_x = d_x + self.wk.backward(merge_heads(d_k))
        d_x = d_x + self.wv.backward(merge_heads(d_v))
        return d_x


class FeedForward:
    """Two-layer MLP with GELU."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, dtype=np.float64):
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)
        self._pre_act = None

    def params(self, prefix: str) -> dict:
        out = self.fc1.params(f"{prefix}.fc1")
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        pre = self.fc1.forward(x)
        self._pre_act = pre
        return self.fc2.forward(gelu(pre))

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d_act = self.fc2.backward(d_out)
        return self.fc1.backward(gelu_backward(self._pre_act, d_act))


class TransformerBlock:
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.)).

    The two residual-branch output projections start downscaled so a
    freshly initialized block is close to the identity; an untrained
    (frozen) stack then passes the patch-embedding signal through
    instead of scrambling it.
    """

    RESIDUAL_INIT_SCALE = 0.1

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, mlp_hidden: int,
                 dtype=np.float64):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(rng, dim, num_heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = FeedForward(rng, dim, mlp_hidden, dtype=dtype)
        self.attn.wo.w.value *= self.RESIDUAL_INIT_SCALE
        self.mlp.fc2.w.value *= self.RESIDUAL_INIT_SCALE

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.attn.params(f"{prefix}.attn"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.mlp.params(f"{prefix}.mlp"))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.mlp.forward(self.ln2.forward(x))

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d_mid = d_out + self.ln2.backward(self.mlp.backward(d_out))
        return d_mid + self.ln1.backward(self.attn.backward(d_mid))


class LSTM:
    """Single-direction recurrence over (N, T, D) sequence batches.

    Gate layout along the last parameter axis is [input, forget,
    candidate, output], each of width ``hidden``.  With
    ``passthrough_bias`` the input and output gates start open and the
    forget gate closed, so a fresh cell roughly projects its current
    input instead of mixing the whole sequence; context then enters as
    the gates train.
    """

    def __init__(self, rng: np.random.Generator, dim_in: int, hidden: int, dtype=np.float64,
                 passthrough_bias: bool = False):
        self.hidden = hidden
        self.wx = Param(gaussian_init(rng, (dim_in, 4 * hidden), dim_in), dtype=dtype)
        self.wh = Param(gaussian_init(rng, (hidden, 4 * hidden), hidden), dtype=dtype)
        bias = np.zeros(4 * hidden)
        if passthrough_bias:
            bias[:hidden] = 1.0  # input gate open
            bias[hidden : 2 * hidden] = -1.0  # forget gate low
            bias[3 * hidden :] = 1.0  # output gate open
        self.b = Param(bias, dtype=dtype)
        self._cache = None

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}

    def forward(self, x: np.ndarray, reverse: bool = False) -> np.ndarray:
        n, t_len, _ = x.shape
        hid = self.hidden
        xs = x[:, ::-1] if reverse else x
        pre_x = xs @ self.wx.value + self.b.value  # (N, T, 4H)
        h = np.zeros((n, hid), dtype=pre_x.dtype)
        c = np.zeros((n, hid), dtype=pre_x.dtype)
        steps = []
        outs = np.empty((n, t_len, hid), dtype=pre_x.dtype)
        for t in range(t_len):
            z = pre_x[:, t] + h @ self.wh.value
            i = sigmoid(z[:, :hid])
            f = sigmoid(z[:, hid : 2 * hid])
            g = np.tanh(z[:, 2 * hid : 3 * hid])
            o = sigmoid(z[:, 3 * hid :])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            steps.append((h, c, i, f, g, o, tc))
            h = o * tc
            c = c_new
            outs[:, t] = h
        self._cache = (xs, steps, reverse)
        return outs[:, ::-1] if reverse else outs

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        xs, steps, reverse = self._cache
        n, t_len, _ = xs.shape
        hid = self.hidden
        d_seq = d_out[:, ::-1] if reverse else d_out
        d_h = np.zeros((n, hid), dtype=xs.dtype)
        d_c = np.zeros((n, hid), dtype=xs.dtype)
        d_x = np.empty_like(xs)
        for t in range(t_len - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = steps[t]
            dh = d_seq[:, t] + d_h
            do = dh * tc
            dc = d_c + dh * o * (1.0 - tc**2)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            d_c = dc * f
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g**2),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            self.wx.grad += xs[:, t].T @ dz
            self.wh.grad += h_prev.T @ dz
            self.b.grad += dz.sum(axis=0)
            d_x[:, t] = dz @ self.wx.value.T
            d_h = dz @ self.wh.value.T
        return d_x[:, ::-1] if reverse else d_x


class BiLSTM:
    """Forward and reverse recurrences with concatenated outputs."""

    def __init__(self, rng: np.random.Generator, dim_in: int, hidden: int, dtype=np.float64,
                 passthrough_bias: bool = False):
        self.fwd = LSTM(rng, dim_in, hidden, dtype=dtype, passthrough_bias=passthrough_bias)
        self.bwd = LSTM(rng, dim_in, hidden, dtype=dtype, passthrough_bias=passthrough_bias)
        self.hidden = hidden

    def params(self, prefix: str) -> dict:
        out = self.fwd.params(f"{prefix}.fwd")
        out.update(self.bwd.params(f"{prefix}.bwd"))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [self.fwd.forward(x), self.bwd.forward(x, reverse=True)], axis=-1
        )

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        hid = self.hidden
        return self.fwd.backward(d_out[..., :hid]) + self.bwd.backward(d_out[..., hid:])


class Adam:
    """Adaptive-moment gradient descent over a {name -> Param} mapping."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, p in params.items():
            if not p.trainable:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.step_count], dtype=np.int64)}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["opt.step"][0])
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m."):]] = arr.copy()
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v."):]] = arr.copy()


def zero_grads(params: dict):
    for p in params.values():
        p.zero_grad()


def bilinear_resize_grid(grid: np.ndarray, new_side: int) -> np.ndarray:
    """Resize (g, g, C) -> (new_side, new_side, C) with corner-aligned
    bilinear interpolation; identity when sides match."""
    g = grid.shape[0]
    if grid.ndim != 3 or grid.shape[1] != g:
        raise ShapeError(f"expected square (g, g, C) grid, got {grid.shape}")
    if new_side == g:
        return grid.copy()
    if new_side == 1 or g == 1:
        src = np.zeros(new_side, dtype=np.int64)
        return grid[src][:, src]
    pos = np.arange(new_side) * (g - 1) / (new_side - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, g - 2)
    frac = (pos - lo).astype(grid.dtype)
    rows = (
        grid[lo] * (1.0 - frac)[:, None, None]
        + grid[lo + 1] * frac[:, None, None]
    )
    out = (
        rows[:, lo] * (1.0 - frac)[None, :, None]
        + rows[:, lo + 1] * frac[None, :, None]
    )
    return out
