"""Finite-difference checks for every layer's backward pass."""
import numpy as np

from patchseg.nn import (
    Adam,
    BiLSTM,
    LSTM,
    LayerNorm,
    Linear,
    MultiHeadSelfAttention,
    Param,
    TransformerBlock,
    bilinear_resize_grid,
    gelu,
    gelu_backward,
    softmax_last,
    softmax_last_backward,
)


def numeric_grad(fn, x, step=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = fn()
        flat[i] = orig - step
        lm = fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * step)
    return grad


def check_layer(layer, params: dict, x, seed=0, tol=1e-6):
    """Compare backward() against finite differences of sum(out * r)."""
    rng = np.random.default_rng(seed)
    r = rng.normal(size=layer.forward(x).shape)

    def loss():
        return float(np.sum(layer.forward(x) * r))

    for p in params.values():
        p.zero_grad()
    layer.forward(x)
    d_x = layer.backward(r.copy())

    fd_x = numeric_grad(loss, x)
    np.testing.assert_allclose(d_x, fd_x, atol=tol, rtol=1e-4)
    for name, p in params.items():
        fd_p = numeric_grad(loss, p.value)
        np.testing.assert_allclose(
            p.grad, fd_p, atol=tol, rtol=1e-4, err_msg=f"param {name}"
        )


def test_linear_backward_matches_fd():
    rng = np.random.default_rng(1)
    layer = Linear(rng, 4, 3)
    x = rng.normal(size=(2, 5, 4))
    check_layer(layer, layer.params("lin"), x)


def test_layernorm_backward_matches_fd():
    rng = np.random.default_rng(2)
    layer = LayerNorm(6)
    layer.gamma.value[:] = rng.normal(size=6)
    layer.beta.value[:] = rng.normal(size=6)
    x = rng.normal(size=(3, 4, 6))
    check_layer(layer, layer.params("ln"), x, tol=1e-5)


def test_gelu_backward_matches_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50,))
    d = rng.normal(size=(50,))
    step = 1e-6
    fd = (gelu(x + step) - gelu(x - step)) / (2 * step)
    np.testing.assert_allclose(gelu_backward(x, d), fd * d, atol=1e-7)


def test_softmax_backward_matches_fd():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(5, 4))
    r = rng.normal(size=(5, 4))

    def loss():
        return float(np.sum(softmax_last(a) * r))

    out = softmax_last(a)
    got = softmax_last_backward(out, r)
    np.testing.assert_allclose(got, numeric_grad(loss, a), atol=1e-7)


def test_attention_backward_matches_fd():
    rng = np.random.default_rng(5)
    layer = MultiHeadSelfAttention(rng, 8, 2)
    x = rng.normal(size=(2, 5, 8))
    check_layer(layer, layer.params("attn"), x, tol=1e-5)


def test_transformer_block_backward_matches_fd():
    rng = np.random.default_rng(6)
    layer = TransformerBlock(rng, 8, 2, 16)
    x = rng.normal(size=(2, 4, 8))
    check_layer(layer, layer.params("blk"), x, tol=1e-5)


def test_lstm_backward_matches_fd():
    rng = np.random.default_rng(7)
    layer = LSTM(rng, 5, 3)
    x = rng.normal(size=(2, 6, 5))
    check_layer(layer, layer.params("lstm"), x, tol=1e-6)


def test_lstm_reverse_backward_matches_fd():
    rng = np.random.default_rng(8)
    inner = LSTM(rng, 4, 3)

    class Reversed:
        def forward(self, x):
            return inner.forward(x, reverse=True)

        def backward(self, d):
            return inner.backward(d)

    x = rng.normal(size=(2, 5, 4))
    check_layer(Reversed(), inner.params("rev"), x, tol=1e-6)


def test_bilstm_backward_matches_fd():
    rng = np.random.default_rng(9)
    layer = BiLSTM(rng, 4, 2)
    x = rng.normal(size=(3, 4, 4))
    check_layer(layer, layer.params("bi"), x, tol=1e-6)


def test_lstm_reverse_equals_flipped_forward():
    rng = np.random.default_rng(10)
    layer = LSTM(rng, 4, 3)
    x = rng.normal(size=(2, 6, 4))
    rev = layer.forward(x, reverse=True)
    flipped = layer.forward(x[:, ::-1])[:, ::-1]
    np.testing.assert_allclose(rev, flipped, atol=1e-12)


def test_adam_zero_lr_keeps_params():
    rng = np.random.default_rng(11)
    p = Param(rng.normal(size=(3, 3)))
    before = p.value.copy()
    opt = Adam(lr=0.0)
    for _ in range(5):
        p.grad = rng.normal(size=(3, 3))
        opt.step({"p": p})
    np.testing.assert_array_equal(p.value, before)


def test_adam_descends_quadratic():
    p = Param(np.array([5.0, -3.0]))
    opt = Adam(lr=0.1)
    for _ in range(500):
        p.grad = 2 * p.value
        opt.step({"p": p})
    assert np.abs(p.value).max() < 1e-3


def test_adam_state_round_trip():
    rng = np.random.default_rng(12)
    p = Param(rng.normal(size=(2, 2)))
    opt = Adam(lr=0.01)
    p.grad = rng.normal(size=(2, 2))
    opt.step({"p": p})
    state = opt.state_arrays()
    opt2 = Adam(lr=0.01)
    opt2.load_state_arrays(state)
    assert opt2.step_count == opt.step_count
    np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
    np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


def test_bilinear_resize_identity():
    rng = np.random.default_rng(13)
    grid = rng.normal(size=(6, 6, 3))
    np.testing.assert_array_equal(bilinear_resize_grid(grid, 6), grid)


def test_bilinear_resize_doubles_corners():
    rng = np.random.default_rng(14)
    grid = rng.normal(size=(4, 4, 2))
    up = bilinear_resize_grid(grid, 8)
    np.testing.assert_allclose(up[0, 0], grid[0, 0], atol=1e-12)
    np.testing.assert_allclose(up[-1, -1], grid[-1, -1], atol=1e-12)
    np.testing.assert_allclose(up[0, -1], grid[0, -1], atol=1e-12)


def test_bilinear_resize_constant_stays_constant():
    grid = np.full((3, 3, 2), 0.7)
    up = bilinear_resize_grid(grid, 9)
    np.testing.assert_allclose(up, 0.7, atol=1e-12)
