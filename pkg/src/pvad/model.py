"""Personal VAD network: streaming Conformer backbone, speaker modulation, 3-class head.

Four variants differ only in how the target speaker embedding enters:

* ``concat``   -- embedding appended to every input frame.
* ``film``     -- FiLM on the backbone output, gamma/beta generated from the embedding.
* ``prenet``   -- FiLM conditioned on the per-frame cosine score between a
  speaker pre-net's frame embedding and the target embedding.
* ``combined`` -- FiLM conditioned on ``[embedding ; cosine score]``.

Posterior columns are ordered ``[tss, ntss, ns]``.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigurationError, ContractError

VARIANTS = ("concat", "film", "prenet", "combined")
CLASSES = ("tss", "ntss", "ns")
TSS, NTSS, NS = 0, 1, 2
DEFAULT_THRESHOLD = 0.1
COS_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "combined"
    num_layers: int = 4
    model_dim: int = 64
    heads: int = 8
    conv_kernel: int = 7
    left_context: int = 31
    input_dim: int = 512
    embedding_dim: int = 256
    prenet_layers: int = 2
    num_classes: int = 3
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("num_layers", "model_dim", "heads", "conv_kernel", "input_dim",
                     "embedding_dim", "num_classes", "ffn_expansion"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.left_context < 0:
            raise ConfigurationError("left_context must be >= 0")
        if self.model_dim % self.heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.num_classes != 3:
            raise ConfigurationError("num_classes must be 3 (tss, ntss, ns)")
        if self.uses_prenet and self.prenet_layers <= 0:
            raise ConfigurationError("prenet_layers must be positive for prenet/combined variants")

    @property
    def uses_prenet(self) -> bool:
        return self.variant in ("prenet", "combined")

    @property
    def uses_film(self) -> bool:
        return self.variant != "concat"

    @property
    def backbone_input_dim(self) -> int:
        return self.input_dim + (self.embedding_dim if self.variant == "concat" else 0)

    @property
    def conditioner_dim(self) -> int:
        return {"film": self.embedding_dim, "prenet": 1, "combined": self.embedding_dim + 1}.get(self.variant, 0)

    @property
    def receptive_field(self) -> int:
        """Past model frames that can influence the current posterior."""
        return self.num_layers * (self.left_context + self.conv_kernel - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelBundle:
    """Named float tensors plus the configuration that built them."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())


# parameter layout -------------------------------------------------------------

# init kinds: "he" (uniform fan-in), "zeros", "ones"


def _block_specs(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f, k = cfg.model_dim, cfg.model_dim * cfg.ffn_expansion, cfg.conv_kernel
    specs = []
    for ffn in ("ffn1", "ffn2"):
        specs += [
            (f"{prefix}.{ffn}.ln.scale", (d,), "ones"),
            (f"{prefix}.{ffn}.ln.offset", (d,), "zeros"),
            (f"{prefix}.{ffn}.fc1.weight", (d, f), "he"),
            (f"{prefix}.{ffn}.fc1.bias", (f,), "zeros"),
            (f"{prefix}.{ffn}.fc2.weight", (f, d), "he"),
            (f"{prefix}.{ffn}.fc2.bias", (d,), "zeros"),
        ]
        if ffn == "ffn1":
            specs += [(f"{prefix}.mhsa.ln.scale", (d,), "ones"), (f"{prefix}.mhsa.ln.offset", (d,), "zeros")]
            for p in "qkvo":
                specs += [(f"{prefix}.mhsa.{p}_weight", (d, d), "he"), (f"{prefix}.mhsa.{p}_bias", (d,), "zeros")]
            specs += [
                (f"{prefix}.conv.ln.scale", (d,), "ones"),
                (f"{prefix}.conv.ln.offset", (d,), "zeros"),
                (f"{prefix}.conv.pw1.weight", (d, 2 * d), "he"),
                (f"{prefix}.conv.pw1.bias", (2 * d,), "zeros"),
                (f"{prefix}.conv.dw.kernel", (k, d), "he"),
                (f"{prefix}.conv.dw.bias", (d,), "zeros"),
                (f"{prefix}.conv.norm.scale", (d,), "ones"),
                (f"{prefix}.conv.norm.offset", (d,), "zeros"),
                (f"{prefix}.conv.pw2.weight", (d, d), "he"),
                (f"{prefix}.conv.pw2.bias", (d,), "zeros"),
            ]
    specs += [(f"{prefix}.final_ln.scale", (d,), "ones"), (f"{prefix}.final_ln.offset", (d,), "zeros")]
    return specs


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, init)`` for every tensor of the model."""
    d = cfg.model_dim
    specs = [
        ("backbone.in_proj.weight", (cfg.backbone_input_dim, d), "he"),
        ("backbone.in_proj.bias", (d,), "zeros"),
    ]
    for i in range(cfg.num_layers):
        specs += _block_specs(f"backbone.layers.{i}", cfg)
    if cfg.uses_prenet:
        specs += [("prenet.in_proj.weight", (cfg.input_dim, d), "he"), ("prenet.in_proj.bias", (d,), "zeros")]
        for i in range(cfg.prenet_layers):
            specs += _block_specs(f"prenet.layers.{i}", cfg)
        specs += [
            ("prenet.out_proj.weight", (d, cfg.embedding_dim), "he"),
            ("prenet.out_proj.bias", (cfg.embedding_dim,), "zeros"),
        ]
    if cfg.uses_film:
        c = cfg.conditioner_dim
        specs += [
            ("film.gamma.weight", (c, d), "zeros"),
            ("film.gamma.bias", (d,), "ones"),
            ("film.beta.weight", (c, d), "zeros"),
            ("film.beta.bias", (d,), "zeros"),
        ]
    specs += [("classifier.weight", (d, cfg.num_classes), "he"), ("classifier.bias", (cfg.num_classes,), "zeros")]
    return specs


def is_weight(name: str) -> bool:
    """Weight matrices and conv kernels, i.e. the tensors that get quantized."""
    return name.endswith("weight") or name.endswith(".kernel")


def build_model(config: ModelConfig, seed: int = 0) -> ModelBundle:
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("build_model expects a ModelConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, init in param_specs(config):
        if init == "he":
            limit = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif init == "ones":
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return ModelBundle(config, tensors)


def sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _put(grads: dict, prefix: str, local: dict) -> None:
    for k, v in local.items():
        grads[f"{prefix}.{k}"] = v


# streaming state -----------------------------------------------------------------


@dataclass
class LayerState:
    """Per-layer streaming cache: last ``left_context`` attention inputs and the conv tail."""

    attention: np.ndarray
    conv: np.ndarray


@dataclass
class ModelState:
    backbone: list[LayerState]
    prenet: list[LayerState] = field(default_factory=list)


def initial_state(cfg: ModelConfig, batch: int = 1, dtype=np.float32) -> ModelState:
    def fresh():
        return LayerState(
            np.zeros((batch, 0, cfg.model_dim), dtype=dtype),
            np.zeros((batch, cfg.conv_kernel - 1, cfg.model_dim), dtype=dtype),
        )

    return ModelState(
        [fresh() for _ in range(cfg.num_layers)],
        [fresh() for _ in range(cfg.prenet_layers)] if cfg.uses_prenet else [],
    )


# conformer ------------------------------------------------------------------------


def _ffn_forward(p, x):
    h0 = L.layer_norm(x, p["ln.scale"], p["ln.offset"])
    h1 = L.linear(h0, p["fc1.weight"], p["fc1.bias"])
    h2 = L.swish(h1)
    return L.linear(h2, p["fc2.weight"], p["fc2.bias"]), (x, h0, h1, h2)


def _ffn_backward(p, cache, g):
    x, h0, h1, h2 = cache
    grads = {}
    g2, grads["fc2.weight"], grads["fc2.bias"] = L.linear_backward(h2, p["fc2.weight"], g)
    g1 = L.swish_backward(h1, g2)
    g0, grads["fc1.weight"], grads["fc1.bias"] = L.linear_backward(h0, p["fc1.weight"], g1)
    gx, grads["ln.scale"], grads["ln.offset"] = L.layer_norm_backward(x, p["ln.scale"], g0)
    return gx, grads


def _conv_forward(p, x, tail):
    n = L.layer_norm(x, p["ln.scale"], p["ln.offset"])
    u = L.linear(n, p["pw1.weight"], p["pw1.bias"])
    gl = L.glu(u)
    v, new_tail = L.causal_depthwise_conv(gl, p["dw.kernel"], p["dw.bias"], tail)
    w = L.layer_norm(v, p["norm.scale"], p["norm.offset"])
    z = L.swish(w)
    o = L.linear(z, p["pw2.weight"], p["pw2.bias"])
    return o, (x, n, u, gl, v, w, z), new_tail


def _conv_backward(p, cache, g):
    x, n, u, gl, v, w, z = cache
    grads = {}
    gz, grads["pw2.weight"], grads["pw2.bias"] = L.linear_backward(z, p["pw2.weight"], g)
    gw = L.swish_backward(w, gz)
    gv, grads["norm.scale"], grads["norm.offset"] = L.layer_norm_backward(v, p["norm.scale"], gw)
    ggl, grads["dw.kernel"], grads["dw.bias"] = L.causal_depthwise_conv_backward(gl, p["dw.kernel"], gv)
    gu = L.glu_backward(u, ggl)
    gn, grads["pw1.weight"], grads["pw1.bias"] = L.linear_backward(n, p["pw1.weight"], gu)
    gx, grads["ln.scale"], grads["ln.offset"] = L.layer_norm_backward(x, p["ln.scale"], gn)
    return gx, grads


def conformer_block_forward(p: dict, cfg: ModelConfig, x: np.ndarray, state: LayerState | None = None):
    """One Conformer block. Returns ``(y, cache, new_state)``.

    Layout: half-step FFN, left-context MHSA, causal conv module, half-step FFN,
    final layer norm; every sub-module is pre-normed with a residual.
    """
    f1, c_f1 = _ffn_forward(sub(p, "ffn1"), x)
    a = x + 0.5 * f1
    m_in = L.layer_norm(a, p["mhsa.ln.scale"], p["mhsa.ln.offset"])
    context = None if state is None else state.attention
    m = L.masked_self_attention(m_in, sub(p, "mhsa"), cfg.heads, cfg.left_context, context)
    b = a + m
    o, c_conv, tail = _conv_forward(sub(p, "conv"), b, None if state is None else state.conv)
    c = b + o
    f2, c_f2 = _ffn_forward(sub(p, "ffn2"), c)
    e = c + 0.5 * f2
    y = L.layer_norm(e, p["final_ln.scale"], p["final_ln.offset"])

    new_state = None
    if state is not None:
        window = m_in if context is None or context.shape[-2] == 0 else np.concatenate([context, m_in], axis=-2)
        keep = min(cfg.left_context, window.shape[-2])
        new_state = LayerState(window[..., window.shape[-2] - keep :, :].copy(), tail.copy())
    return y, (x, c_f1, a, m_in, b, c_conv, c, c_f2, e), new_state


def conformer_block_backward(p: dict, cfg: ModelConfig, cache, gy):
    x, c_f1, a, m_in, b, c_conv, c, c_f2, e = cache
    grads = {}
    ge, grads["final_ln.scale"], grads["final_ln.offset"] = L.layer_norm_backward(e, p["final_ln.scale"], gy)
    g, local = _ffn_backward(sub(p, "ffn2"), c_f2, 0.5 * ge)
    _put(grads, "ffn2", local)
    gc = ge + g
    g, local = _conv_backward(sub(p, "conv"), c_conv, gc)
    _put(grads, "conv", local)
    gb = gc + g
    g_min, local = L.masked_self_attention_backward(m_in, sub(p, "mhsa"), cfg.heads, cfg.left_context, gb)
    _put(grads, "mhsa", local)
    g, grads["mhsa.ln.scale"], grads["mhsa.ln.offset"] = L.layer_norm_backward(a, p["mhsa.ln.scale"], g_min)
    ga = gb + g
    g, local = _ffn_backward(sub(p, "ffn1"), c_f1, 0.5 * ga)
    _put(grads, "ffn1", local)
    return ga + g, grads


def _stack_forward(params, cfg, prefix, n_layers, x, states):
    caches, new_states = [], []
    for i in range(n_layers):
        st = None if states is None else states[i]
        x, cache, ns = conformer_block_forward(sub(params, f"{prefix}.layers.{i}"), cfg, x, st)
        caches.append(cache)
        new_states.append(ns)
    return x, caches, new_states


def _stack_backward(params, cfg, prefix, caches, g, grads):
    for i in reversed(range(len(caches))):
        lp = f"{prefix}.layers.{i}"
        g, local = conformer_block_backward(sub(params, lp), cfg, caches[i], g)
        _put(grads, lp, local)
    return g


# speaker modulation ------------------------------------------------------------------


def zero_sentinel(embedding: np.ndarray) -> np.ndarray:
    """Boolean mask over leading axes: True where the embedding is exactly all-zero."""
    return ~np.any(np.asarray(embedding) != 0, axis=-1)


def cosine_scores(frame_embeddings: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-frame cosine between ``(..., T, De)`` frame embeddings and ``(..., De)`` targets.

    An all-zero target is the enrollment-less sentinel and scores 0 everywhere.
    """
    return _cosine_forward(frame_embeddings, target)[0]


def _cosine_forward(ep, emb):
    emb = np.asarray(emb, dtype=ep.dtype)
    na = np.maximum(np.sqrt((ep * ep).sum(axis=-1)), COS_EPS)
    ne = np.sqrt((emb * emb).sum(axis=-1))
    zero = ne == 0
    ne_safe = np.where(zero, 1, ne)[..., None]
    dots = (ep * emb[..., None, :]).sum(axis=-1)
    s = dots / (na * ne_safe)
    s = np.where(zero[..., None], 0, s)
    return s, (ep, emb, na, ne_safe, zero, s)


def _cosine_backward(cache, gs):
    ep, emb, na, ne_safe, zero, s = cache
    g = gs[..., None] * (emb[..., None, :] / (na * ne_safe)[..., None] - s[..., None] * ep / (na * na)[..., None])
    return np.where(zero[..., None, None], 0, g)


def film_generate(bundle_or_params, conditioner: np.ndarray):
    """FiLM generator: ``(gamma, beta)``, each one affine map of the conditioner."""
    params = bundle_or_params.tensors if isinstance(bundle_or_params, ModelBundle) else bundle_or_params
    if "film.gamma.weight" not in params:
        raise ContractError("model has no FiLM generator (concat variant)")
    conditioner = np.asarray(conditioner, dtype=params["film.gamma.weight"].dtype)
    expected = params["film.gamma.weight"].shape[0]
    if conditioner.shape[-1] != expected:
        raise ContractError(f"conditioner length {conditioner.shape[-1]} != generator input {expected}")
    gamma = L.linear(conditioner, params["film.gamma.weight"], params["film.gamma.bias"])
    beta = L.linear(conditioner, params["film.beta.weight"], params["film.beta.bias"])
    return gamma, beta


# full network -----------------------------------------------------------------------


def _as_batch(features, embedding, cfg):
    feats = np.asarray(features)
    emb = np.asarray(embedding)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    if emb.ndim == 1:
        emb = np.broadcast_to(emb, (feats.shape[0], emb.shape[0]))
    if feats.ndim != 3 or feats.shape[-1] != cfg.input_dim:
        raise ContractError(f"features must have {cfg.input_dim} columns, got shape {np.shape(features)}")
    if emb.shape != (feats.shape[0], cfg.embedding_dim):
        raise ContractError(f"embedding must have length {cfg.embedding_dim}, got shape {np.shape(embedding)}")
    return feats, emb, single


def _network_forward(params, cfg: ModelConfig, feats, emb, states: ModelState | None = None):
    """Batched forward ``(B, T, F) x (B, De) -> logits (B, T, 3)``.

    Returns ``(logits, cache, new_states)``.
    """
    dtype = params["classifier.weight"].dtype
    feats = feats.astype(dtype, copy=False)
    emb = emb.astype(dtype, copy=False)
    bsz, t, _ = feats.shape

    if cfg.variant == "concat":
        x_in = np.concatenate([feats, np.broadcast_to(emb[:, None, :], (bsz, t, cfg.embedding_dim))], axis=-1)
    else:
        x_in = feats
    h0 = L.linear(x_in, params["backbone.in_proj.weight"], params["backbone.in_proj.bias"])
    h, bb_caches, bb_states = _stack_forward(
        params, cfg, "backbone", cfg.num_layers, h0, None if states is None else states.backbone
    )

    cache = {"x_in": x_in, "bb": bb_caches, "h": h}
    pn_states = []
    if cfg.uses_prenet:
        p0 = L.linear(feats, params["prenet.in_proj.weight"], params["prenet.in_proj.bias"])
        ph, pn_caches, pn_states = _stack_forward(
            params, cfg, "prenet", cfg.prenet_layers, p0, None if states is None else states.prenet
        )
        ep = L.linear(ph, params["prenet.out_proj.weight"], params["prenet.out_proj.bias"])
        s, cos_cache = _cosine_forward(ep, emb)
        cache.update(feats=feats, pn=pn_caches, ph=ph, cos=cos_cache, s=s)

    if cfg.variant == "film":
        cond = emb[:, None, :]
    elif cfg.variant == "prenet":
        cond = s[..., None]
    elif cfg.variant == "combined":
        cond = np.concatenate([np.broadcast_to(emb[:, None, :], (bsz, t, cfg.embedding_dim)), s[..., None]], axis=-1)
    if cfg.uses_film:
        gamma, beta = film_generate(params, cond)
        z = gamma * h + beta
        cache.update(cond=cond, gamma=gamma)
    else:
        z = h
    cache["z"] = z
    logits = L.linear(z, params["classifier.weight"], params["classifier.bias"])
    new_states = None if states is None else ModelState(bb_states, pn_states)
    return logits, cache, new_states


def _network_backward(params, cfg: ModelConfig, cache, g_logits) -> dict:
    grads = {}
    gz, grads["classifier.weight"], grads["classifier.bias"] = L.linear_backward(
        cache["z"], params["classifier.weight"], g_logits
    )
    h = cache["h"]
    if cfg.uses_film:
        gamma, cond = cache["gamma"], cache["cond"]
        g_gamma = gz * h
        g_beta = gz
        if gamma.shape[-2] == 1 and h.shape[-2] != 1:
            g_gamma = g_gamma.sum(axis=-2, keepdims=True)
            g_beta = g_beta.sum(axis=-2, keepdims=True)
        gc1, grads["film.gamma.weight"], grads["film.gamma.bias"] = L.linear_backward(
            cond, params["film.gamma.weight"], g_gamma
        )
        gc2, grads["film.beta.weight"], grads["film.beta.bias"] = L.linear_backward(
            cond, params["film.beta.weight"], g_beta
        )
        gh = gz * gamma
        if cfg.uses_prenet:
            gs = (gc1 + gc2)[..., -1]
            g_ep = _cosine_backward(cache["cos"], gs)
            g_ph, grads["prenet.out_proj.weight"], grads["prenet.out_proj.bias"] = L.linear_backward(
                cache["ph"], params["prenet.out_proj.weight"], g_ep
            )
            g_p0 = _stack_backward(params, cfg, "prenet", cache["pn"], g_ph, grads)
            _, grads["prenet.in_proj.weight"], grads["prenet.in_proj.bias"] = L.linear_backward(
                cache["feats"], params["prenet.in_proj.weight"], g_p0
            )
    else:
        gh = gz
    g_h0 = _stack_backward(params, cfg, "backbone", cache["bb"], gh, grads)
    _, grads["backbone.in_proj.weight"], grads["backbone.in_proj.bias"] = L.linear_backward(
        cache["x_in"], params["backbone.in_proj.weight"], g_h0
    )
    return grads


def forward(bundle: ModelBundle, features: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """Frame posteriors ``[p_tss, p_ntss, p_ns]``.

    ``features`` is ``(T, F)`` or ``(B, T, F)``; ``embedding`` is ``(De,)`` or ``(B, De)``.
    """
    feats, emb, single = _as_batch(features, embedding, bundle.config)
    logits, _, _ = _network_forward(bundle.tensors, bundle.config, feats, emb)
    p = L.softmax(logits)
    return p[0] if single else p


def forward_stream(bundle: ModelBundle, features: np.ndarray, embedding: np.ndarray, state: ModelState):
    """Streaming forward over new frames ``(T, F)``; returns ``(posteriors, new_state)``."""
    feats, emb, _ = _as_batch(features, embedding, bundle.config)
    logits, _, new_state = _network_forward(bundle.tensors, bundle.config, feats, emb, state)
    return L.softmax(logits)[0], new_state


def prenet_embeddings(bundle: ModelBundle, features: np.ndarray) -> np.ndarray:
    """Per-frame pre-net embeddings ``(T, De)``."""
    cfg = bundle.config
    if not cfg.uses_prenet:
        raise ContractError(f"variant {cfg.variant!r} has no speaker pre-net")
    params = bundle.tensors
    feats = np.asarray(features, dtype=params["prenet.in_proj.weight"].dtype)
    if feats.shape[-1] != cfg.input_dim:
        raise ContractError(f"features must have {cfg.input_dim} columns")
    p0 = L.linear(feats, params["prenet.in_proj.weight"], params["prenet.in_proj.bias"])
    ph, _, _ = _stack_forward(params, cfg, "prenet", cfg.prenet_layers, p0, None)
    return L.linear(ph, params["prenet.out_proj.weight"], params["prenet.out_proj.bias"])


def prenet_similarity(bundle: ModelBundle, features: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """Per-frame cosine similarity between pre-net embeddings and the target embedding."""
    if not bundle.config.uses_prenet:
        raise ContractError(f"variant {bundle.config.variant!r} has no speaker pre-net")
    embedding = np.asarray(embedding)
    if embedding.shape[-1] != bundle.config.embedding_dim:
        raise ContractError(f"embedding must have length {bundle.config.embedding_dim}")
    return cosine_scores(prenet_embeddings(bundle, features), embedding)


LABEL_FLOOR = 1e-12


def _masked_ce(p, labels, mask):
    labels = np.asarray(labels)
    if labels.shape != p.shape[:-1]:
        raise ContractError(f"labels shape {labels.shape} != frames {p.shape[:-1]}")
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = max(int(mask.sum()), 1)
    p_label = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    loss = float(-(np.log(np.maximum(p_label, LABEL_FLOOR)) * mask).sum() / n)
    return loss, labels, mask, n, p_label


def loss_value(params: dict, cfg: ModelConfig, feats, emb, labels, mask=None) -> float:
    """Forward-only version of :func:`loss_and_grads`."""
    logits, _, _ = _network_forward(params, cfg, feats, emb)
    return _masked_ce(L.softmax(logits), labels, mask)[0]


def loss_and_grads(params: dict, cfg: ModelConfig, feats, emb, labels, mask=None):
    """Mean frame cross-entropy over valid frames and its gradient w.r.t. every tensor.

    ``feats`` ``(B, T, F)``, ``emb`` ``(B, De)``, ``labels`` ``(B, T)`` ints,
    ``mask`` ``(B, T)`` bool (padding frames excluded).
    """
    logits, cache, _ = _network_forward(params, cfg, feats, emb)
    p = L.softmax(logits)
    loss, labels, mask, n, p_label = _masked_ce(p, labels, mask)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, labels[..., None], 1, axis=-1)
    live = mask & (p_label >= LABEL_FLOOR)
    g_logits = ((p - onehot) * (live[..., None] / n)).astype(p.dtype)
    return loss, _network_backward(params, cfg, cache, g_logits)


# decisions --------------------------------------------------------------------------


class Decision(str, enum.Enum):
    PASS = "pass"
    SUPPRESS = "suppress"


def classify_frame(posterior, threshold: float = DEFAULT_THRESHOLD) -> Decision:
    """Pass the frame downstream iff ``p_tss >= threshold``."""
    return Decision.PASS if posterior[TSS] >= threshold else Decision.SUPPRESS


def decisions(posteriors: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Vectorized :func:`classify_frame`: True where the frame passes."""
    return np.asarray(posteriors)[..., TSS] >= threshold


# whole-network gradient check ---------------------------------------------------------

GRADCHECK_CONFIG = dict(
    num_layers=1, model_dim=8, heads=2, conv_kernel=3, left_context=2,
    input_dim=6, embedding_dim=4, prenet_layers=1, ffn_expansion=2,
)


def model_gradcheck(variant: str = "combined", seed: int = 0, frames: int = 5, batch: int = 2) -> float:
    """Max relative error of :func:`loss_and_grads` against finite differences.

    Runs on a shrunken configuration (every parameter is probed, so the full
    size would take hours). Parameters get a random perturbation so that the
    zero-initialised FiLM generators are not probed at a degenerate point.
    """
    cfg = ModelConfig(variant=variant, **GRADCHECK_CONFIG)
    rng = np.random.default_rng([seed, 17])
    params = {k: v.astype(np.float64) + 0.1 * rng.standard_normal(v.shape)
              for k, v in build_model(cfg, seed).tensors.items()}
    feats = rng.standard_normal((batch, frames, cfg.input_dim))
    emb = rng.standard_normal((batch, cfg.embedding_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    emb[-1] = 0.0  # one enrollment-less row exercises the s = 0 branch
    labels = rng.integers(0, 3, size=(batch, frames))
    mask = np.ones((batch, frames), dtype=bool)
    mask[0, -1] = False

    def fwd(p, _):
        return loss_value(p, cfg, feats, emb, labels, mask)

    def analytic(p, _):
        return loss_and_grads(p, cfg, feats, emb, labels, mask)[1], None

    return L.finite_difference_check(fwd, params, None, analytic)
