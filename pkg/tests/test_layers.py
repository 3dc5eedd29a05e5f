import numpy as np
import pytest

from pvad import layers as L
from pvad.errors import ConfigurationError, ContractError, NumericError

SEEDS = (0, 1, 2)


def _params(kind, rng, c=8):
    if kind in ("linear", "pointwise_conv"):
        return {"weight": rng.standard_normal((c, 5)), "bias": rng.standard_normal(5)}
    if kind == "layer_norm":
        return {"scale": rng.standard_normal(c), "offset": rng.standard_normal(c)}
    if kind == "causal_depthwise_conv":
        return {"kernel": rng.standard_normal((3, c)), "bias": rng.standard_normal(c)}
    return {}


def primitive_error(kind, seed):
    rng = np.random.default_rng([seed, L.KINDS.index(kind)])
    x = rng.standard_normal((4, 8))
    if kind == "relu":
        x += np.sign(x) * 0.01  # keep the 4-point stencil off the kink at 0
    params = _params(kind, rng)
    upstream = rng.standard_normal(L.primitive_forward(kind, x, params)[0].shape)

    def fwd(p, inp):
        return float(np.sum(upstream * L.primitive_forward(kind, inp, p)[0]))

    def analytic(p, inp):
        gx, grads = L.primitive_backward(kind, inp, p, upstream)
        return grads, gx

    return L.finite_difference_check(fwd, params, x, analytic)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", L.KINDS)
def test_primitive_gradients(kind, seed):
    assert primitive_error(kind, seed) < 1e-4


def attention_error(seed, heads=2, left=2):
    rng = np.random.default_rng([seed, 99])
    x = rng.standard_normal((5, 8))
    params = {k: rng.standard_normal((8, 8)) * 0.5 if k.endswith("weight") else rng.standard_normal(8) * 0.1
              for k in L.ATTENTION_KEYS}
    upstream = rng.standard_normal((5, 8))

    def fwd(p, inp):
        return float(np.sum(upstream * L.masked_self_attention(inp, p, heads, left)))

    def analytic(p, inp):
        gx, grads = L.masked_self_attention_backward(inp, p, heads, left, upstream)
        return grads, gx

    return L.finite_difference_check(fwd, params, x, analytic)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradients(seed):
    assert attention_error(seed) < 1e-4


def test_fd_check_catches_wrong_gradient():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8))
    p = {"weight": rng.standard_normal((8, 3))}
    fwd = lambda p, x: float(np.sum(L.linear(x, p["weight"]) ** 2))
    wrong = ({"weight": np.zeros((8, 3))}, np.zeros_like(x))
    assert L.finite_difference_check(fwd, p, x, wrong) > 0.5


def test_fd_check_rejects_nonfinite():
    p = {"w": np.array([1.0])}
    with pytest.raises(NumericError):
        L.finite_difference_check(lambda p, x: float("nan"), p, None, ({"w": np.zeros(1)}, None))


def test_mask_t5_l2():
    mask = L.attention_mask(5, 5, 2)
    assert np.flatnonzero(mask[4]).tolist() == [2, 3, 4]
    assert np.flatnonzero(mask[0]).tolist() == [0]
    assert not np.any(np.triu(mask, 1))


def test_sequence_layers_are_causal():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    att = {k: rng.standard_normal((8, 8)).astype(np.float32) if k.endswith("weight")
           else np.zeros(8, np.float32) for k in L.ATTENTION_KEYS}
    kernel = rng.standard_normal((3, 8)).astype(np.float32)
    layers = [
        lambda v: L.masked_self_attention(v, att, heads=2, left_context=3),
        lambda v: L.causal_depthwise_conv(v, kernel)[0],
    ]
    for f in layers:
        base = f(x)
        for t in range(9):
            y = x.copy()
            y[t + 1 :] += rng.standard_normal((9 - t, 8)).astype(np.float32)
            np.testing.assert_array_equal(f(y)[: t + 1], base[: t + 1])


def test_attention_window_is_tight():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    att = {k: rng.standard_normal((8, 8)).astype(np.float32) if k.endswith("weight")
           else np.zeros(8, np.float32) for k in L.ATTENTION_KEYS}
    base = L.masked_self_attention(x, att, 2, 3)
    y = x.copy()
    y[5] += 1.0
    out = L.masked_self_attention(y, att, 2, 3)
    changed = np.flatnonzero(np.any(out != base, axis=1)).tolist()
    assert changed == [5, 6, 7, 8]


def test_conv_kernel_taps_and_streaming_tail():
    x = np.zeros((6, 1), np.float32)
    x[2] = 1.0
    kernel = np.array([[3.0], [2.0], [1.0]], np.float32)  # last row taps the current frame
    y, _ = L.causal_depthwise_conv(x, kernel)
    assert y[:, 0].tolist() == [0, 0, 1, 2, 3, 0]

    rng = np.random.default_rng(1)
    x = rng.standard_normal((9, 4)).astype(np.float32)
    kernel = rng.standard_normal((3, 4)).astype(np.float32)
    full, _ = L.causal_depthwise_conv(x, kernel)
    a, tail = L.causal_depthwise_conv(x[:4], kernel)
    b, _ = L.causal_depthwise_conv(x[4:], kernel, tail=tail)
    np.testing.assert_allclose(np.concatenate([a, b]), full, atol=1e-6)


def test_attention_context_matches_offline():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((12, 8)).astype(np.float32)
    att = {k: rng.standard_normal((8, 8)).astype(np.float32) if k.endswith("weight")
           else rng.standard_normal(8).astype(np.float32) for k in L.ATTENTION_KEYS}
    full = L.masked_self_attention(x, att, 2, 3)
    tail = L.masked_self_attention(x[7:], att, 2, 3, context=x[4:7])
    np.testing.assert_allclose(tail, full[7:], atol=1e-5)


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(3)
    x = (rng.standard_normal((50, 7)) * 30).astype(np.float32)
    p = L.softmax(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    q = L.softmax(np.array([[1000.0, 0.0, -1000.0]], np.float32))
    assert np.all(np.isfinite(q))


def test_layer_norm_moments():
    rng = np.random.default_rng(6)
    x = (rng.standard_normal((40, 64)) * 5 + 3).astype(np.float32)
    y = L.layer_norm(x, np.ones(64, np.float32), np.zeros(64, np.float32))
    assert np.max(np.abs(y.mean(axis=-1))) < 1e-5
    assert np.max(np.abs(y.var(axis=-1) - 1)) < 1e-4


def test_activations():
    x = np.linspace(-5, 5, 11).astype(np.float32)
    np.testing.assert_allclose(L.swish(x), x / (1 + np.exp(-x.astype(np.float64))), rtol=1e-6)
    np.testing.assert_array_equal(L.relu(x), np.maximum(x, 0))
    ab = np.array([[2.0, 0.0]], np.float32)
    np.testing.assert_allclose(L.glu(ab), [[1.0]])
    assert L.linear(np.ones((2, 3), np.float32), np.ones((3, 4), np.float32)).dtype == np.float32


def test_errors():
    with pytest.raises(ConfigurationError):
        L.primitive_forward("bogus", np.zeros((2, 2)))
    with pytest.raises(ContractError):
        L.primitive_backward("relu", np.zeros((2, 2)), None, np.zeros((3, 2)))
    att = {k: np.zeros((6, 6)) if k.endswith("weight") else np.zeros(6) for k in L.ATTENTION_KEYS}
    with pytest.raises(ConfigurationError):
        L.masked_self_attention(np.zeros((2, 6)), att, heads=4)
