"""Numpy layer primitives with analytic backward passes.

Every sequence tensor is laid out ``(..., T, d)``: leading axes are batch
axes, the penultimate axis is time. Parameters are plain dicts of arrays;
computation runs in the parameters' dtype (float32 for inference/training,
float64 for gradient checks).
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError

LN_EPS = 1e-6

Params = Mapping[str, np.ndarray]


def _check_last_dim(x: np.ndarray, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ContractError(f"{what}: expected last dim {expected}, got shape {x.shape}")


def _sum_to_2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum over leading axes of a[..., :, None] * b[..., None, :]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _sum_leading(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# forward --------------------------------------------------------------------


def linear(x, weight, bias=None):
    _check_last_dim(x, weight.shape[0], "linear")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def layer_norm(x, scale, offset):
    _check_last_dim(x, scale.shape[0], "layer_norm")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * scale + offset


def swish(x):
    return x * sigmoid(x)


def relu(x):
    return np.maximum(x, 0)


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glu(x):
    if x.shape[-1] % 2:
        raise ContractError(f"glu: last dim must be even, got {x.shape[-1]}")
    a, b = np.split(x, 2, axis=-1)
    return a * sigmoid(b)


def causal_depthwise_conv(x, kernel, bias=None, tail=None):
    """Depthwise temporal conv; output frame t reads inputs t-K+1..t.

    ``kernel`` has shape ``(K, C)`` and its last row taps the current frame.
    ``tail`` holds the previous ``K - 1`` input frames (zeros at stream start).
    Returns ``(y, new_tail)``.
    """
    k, c = kernel.shape
    _check_last_dim(x, c, "causal_depthwise_conv")
    if tail is None:
        tail = np.zeros(x.shape[:-2] + (k - 1, c), dtype=x.dtype)
    elif tail.shape[-2:] != (k - 1, c):
        raise ContractError(f"conv tail must be (..., {k - 1}, {c}), got {tail.shape}")
    padded = np.concatenate([tail, x], axis=-2)
    t = x.shape[-2]
    y = np.zeros_like(x)
    for j in range(k):
        y = y + padded[..., j : j + t, :] * kernel[j]
    if bias is not None:
        y = y + bias
    new_tail = padded[..., padded.shape[-2] - (k - 1) :, :]
    return y, new_tail


KINDS = ("linear", "layer_norm", "swish", "relu", "softmax", "glu", "causal_depthwise_conv", "pointwise_conv")


def primitive_forward(kind: str, x: np.ndarray, params: Params | None = None, state=None):
    """Dispatch a primitive by name. Returns ``(y, state)``.

    ``state`` is only meaningful for ``causal_depthwise_conv`` (the conv tail).
    """
    params = params or {}
    if kind in ("linear", "pointwise_conv"):
        return linear(x, params["weight"], params.get("bias")), None
    if kind == "layer_norm":
        return layer_norm(x, params["scale"], params["offset"]), None
    if kind == "swish":
        return swish(x), None
    if kind == "relu":
        return relu(x), None
    if kind == "softmax":
        return softmax(x), None
    if kind == "glu":
        return glu(x), None
    if kind == "causal_depthwise_conv":
        return causal_depthwise_conv(x, params["kernel"], params.get("bias"), state)
    raise ConfigurationError(f"unknown primitive kind {kind!r}")


# backward -------------------------------------------------------------------


def linear_backward(x, weight, g):
    return g @ weight.T, _sum_to_2d(x, g), _sum_leading(g)


def layer_norm_backward(x, scale, g):
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    g_scale = _sum_leading(g * xhat)
    g_offset = _sum_leading(g)
    gh = g * scale
    gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
    return gx, g_scale, g_offset


def swish_backward(x, g):
    s = sigmoid(x)
    return g * (s + x * s * (1 - s))


def relu_backward(x, g):
    return g * (x > 0)


def softmax_backward_from_output(p, g):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def glu_backward(x, g):
    a, b = np.split(x, 2, axis=-1)
    s = sigmoid(b)
    return np.concatenate([g * s, g * a * s * (1 - s)], axis=-1)


def causal_depthwise_conv_backward(x, kernel, g):
    """Backward of the offline (zero tail) conv. Returns ``(gx, g_kernel, g_bias)``."""
    k, c = kernel.shape
    t = x.shape[-2]
    padded = np.concatenate([np.zeros(x.shape[:-2] + (k - 1, c), dtype=x.dtype), x], axis=-2)
    g_padded = np.zeros_like(padded)
    g_kernel = np.zeros_like(kernel)
    for j in range(k):
        g_padded[..., j : j + t, :] += g * kernel[j]
        g_kernel[j] = _sum_leading(g * padded[..., j : j + t, :])
    return g_padded[..., k - 1 :, :], g_kernel, _sum_leading(g)


def primitive_backward(kind: str, x: np.ndarray, params: Params | None, upstream: np.ndarray):
    """Analytic gradient of ``sum(upstream * forward(x))``.

    Returns ``(grad_x, grad_params)`` with ``grad_params`` keyed like ``params``.
    """
    params = params or {}
    y, _ = primitive_forward(kind, x, params)
    if upstream.shape != y.shape:
        raise ContractError(f"{kind}: upstream shape {upstream.shape} != output shape {y.shape}")
    if kind in ("linear", "pointwise_conv"):
        gx, gw, gb = linear_backward(x, params["weight"], upstream)
        grads = {"weight": gw}
        if "bias" in params:
            grads["bias"] = gb
        return gx, grads
    if kind == "layer_norm":
        gx, gs, go = layer_norm_backward(x, params["scale"], upstream)
        return gx, {"scale": gs, "offset": go}
    if kind == "swish":
        return swish_backward(x, upstream), {}
    if kind == "relu":
        return relu_backward(x, upstream), {}
    if kind == "softmax":
        return softmax_backward_from_output(y, upstream), {}
    if kind == "glu":
        return glu_backward(x, upstream), {}
    if kind == "causal_depthwise_conv":
        gx, gk, gb = causal_depthwise_conv_backward(x, params["kernel"], upstream)
        grads = {"kernel": gk}
        if "bias" in params:
            grads["bias"] = gb
        return gx, grads
    raise ConfigurationError(f"unknown primitive kind {kind!r}")


# attention --------------------------------------------------------------------

ATTENTION_KEYS = ("q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias", "o_weight", "o_bias")


def attention_mask(n_query: int, n_key: int, left_context: int) -> np.ndarray:
    """Boolean ``(n_query, n_key)`` mask; queries are the last ``n_query`` key positions."""
    q_pos = np.arange(n_key - n_query, n_key)[:, None]
    k_pos = np.arange(n_key)[None, :]
    lag = q_pos - k_pos
    return (lag >= 0) & (lag <= left_context)


def _split_heads(a, heads):
    *lead, t, d = a.shape
    return a.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(a):
    *lead, h, t, dh = a.shape
    return a.swapaxes(-2, -3).reshape(*lead, t, h * dh)


def _attention_forward(x, params, heads, left_context, context=None):
    d = x.shape[-1]
    if d % heads:
        raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
    if left_context < 0:
        raise ConfigurationError("left_context must be >= 0")
    kv_in = x if context is None or context.shape[-2] == 0 else np.concatenate([context, x], axis=-2)
    q = _split_heads(linear(x, params["q_weight"], params["q_bias"]), heads)
    k = _split_heads(linear(kv_in, params["k_weight"], params["k_bias"]), heads)
    v = _split_heads(linear(kv_in, params["v_weight"], params["v_bias"]), heads)
    scale = 1.0 / np.sqrt(d // heads)
    logits = (q @ k.swapaxes(-1, -2)) * x.dtype.type(scale)
    mask = attention_mask(x.shape[-2], kv_in.shape[-2], left_context)
    logits = np.where(mask, logits, -np.inf)
    att = softmax(logits)
    ctx = _merge_heads(att @ v)
    y = linear(ctx, params["o_weight"], params["o_bias"])
    return y, (q, k, v, att, ctx, scale)


def masked_self_attention(x, params: Params, heads: int = 8, left_context: int = 31, context=None):
    """Multi-head self-attention with a left-context window and no right context.

    Output frame ``t`` depends on inputs ``max(0, t-L)..t`` only. ``context``
    optionally supplies earlier input frames (the streaming cache); those
    frames serve as keys/values but produce no output rows.
    """
    return _attention_forward(x, params, heads, left_context, context)[0]


def masked_self_attention_backward(x, params: Params, heads: int, left_context: int, upstream):
    """Gradients of ``sum(upstream * masked_self_attention(x))`` (offline, no context)."""
    y, (q, k, v, att, ctx, scale) = _attention_forward(x, params, heads, left_context)
    if upstream.shape != y.shape:
        raise ContractError(f"attention: upstream shape {upstream.shape} != {y.shape}")
    grads = {}
    g_ctx, grads["o_weight"], grads["o_bias"] = linear_backward(ctx, params["o_weight"], upstream)
    g_ctx = _split_heads(g_ctx, heads)
    g_att = g_ctx @ v.swapaxes(-1, -2)
    g_v = att.swapaxes(-1, -2) @ g_ctx
    g_logits = softmax_backward_from_output(att, g_att) * x.dtype.type(scale)
    g_q = g_logits @ k
    g_k = g_logits.swapaxes(-1, -2) @ q
    gx = np.zeros_like(x)
    for name, g in (("q", g_q), ("k", g_k), ("v", g_v)):
        gi, grads[f"{name}_weight"], grads[f"{name}_bias"] = linear_backward(
            x, params[f"{name}_weight"], _merge_heads(g)
        )
        gx = gx + gi
    return gx, grads


# gradient checking -------------------------------------------------------------


def _central_derivative(f: Callable[[], float], arr: np.ndarray, i: int, h: float) -> float:
    """Fourth-order central difference of ``f`` w.r.t. ``arr.flat[i]`` with step h."""
    orig = arr.flat[i]
    vals = []
    for step in (-2 * h, -h, h, 2 * h):
        arr.flat[i] = orig + step
        vals.append(f())
    arr.flat[i] = orig
    fm2, fm1, fp1, fp2 = vals
    return (fm2 - 8 * fm1 + 8 * fp1 - fp2) / (12 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(
    forward_fn: Callable[[dict, np.ndarray], float],
    params: dict,
    inputs: np.ndarray,
    analytic: tuple[dict, np.ndarray] | Callable[[dict, np.ndarray], tuple[dict, np.ndarray]],
    h: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward_fn(params, inputs)`` returns a scalar loss. ``analytic`` is
    either ``(grad_params, grad_inputs)`` or a callable producing them. All
    arrays are promoted to float64 before probing. Pass ``inputs=None`` to
    probe parameters only.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    inputs = None if inputs is None else np.array(inputs, dtype=np.float64)
    if callable(analytic):
        analytic = analytic(params, inputs)
    g_params, g_inputs = analytic

    def loss() -> float:
        value = float(forward_fn(params, inputs))
        if not np.isfinite(value):
            raise NumericError("non-finite loss during finite-difference probe")
        return value

    worst = 0.0
    probes = [(params[name], g_params[name]) for name in sorted(params)]
    if inputs is not None and g_inputs is not None:
        probes.append((inputs, g_inputs))
    for arr, grad in probes:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arr.shape:
            raise ContractError(f"gradient shape {grad.shape} != parameter shape {arr.shape}")
        numeric = np.array([_central_derivative(loss, arr, i, h) for i in range(arr.size)])
        worst = max(worst, relative_error(grad.ravel(), numeric))
    return worst
