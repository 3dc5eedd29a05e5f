import numpy as np
import pytest

from pvad import layers as L
from pvad import model as M
from pvad.errors import ConfigurationError, ContractError

from conftest import tiny_config, unit


def expected_param_count(variant, n_layers=4, d=64, k=7, f_in=512, de=256, n_pre=2, exp=4):
    """Closed-form count, written from the architecture description rather than the code."""
    ffn = 2 * d + (d * exp * d + exp * d) + (exp * d * d + d)
    mhsa = 2 * d + 4 * (d * d + d)
    conv = 2 * d + (d * 2 * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d)
    block = 2 * ffn + mhsa + conv + 2 * d
    backbone_in = f_in + (de if variant == "concat" else 0)
    total = backbone_in * d + d + n_layers * block + d * 3 + 3
    if variant in ("prenet", "combined"):
        total += f_in * d + d + n_pre * block + d * de + de
    cond = {"concat": 0, "film": de, "prenet": 1, "combined": de + 1}[variant]
    if cond:
        total += 2 * (cond * d + d)
    return total


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_parameter_count_matches_oracle(variant):
    bundle = M.build_model(M.ModelConfig(variant=variant), seed=0)
    assert bundle.num_parameters() == expected_param_count(variant)


def test_build_is_deterministic():
    a = M.build_model(M.ModelConfig(), 3)
    b = M.build_model(M.ModelConfig(), 3)
    c = M.build_model(M.ModelConfig(), 4)
    assert list(a.tensors) == list(b.tensors)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
    assert any(a.tensors[k].tobytes() != c.tensors[k].tobytes() for k in a.tensors)
    assert all(v.dtype == np.float32 for v in a.tensors.values())


def test_receptive_field_default():
    assert M.ModelConfig().receptive_field == 4 * (31 + 7 - 1) == 148


def test_config_validation():
    with pytest.raises(ConfigurationError):
        M.ModelConfig(variant="bogus")
    with pytest.raises(ConfigurationError):
        M.ModelConfig(model_dim=10, heads=4)
    with pytest.raises(ConfigurationError):
        M.ModelConfig(num_classes=2)
    with pytest.raises(ConfigurationError):
        M.ModelConfig.from_dict({"variant": "film", "colour": "blue"})
    cfg = M.ModelConfig(variant="prenet", num_layers=2)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_posteriors_are_distributions(variant):
    cfg = tiny_config(variant)
    bundle = M.build_model(cfg, 1)
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((3, 20, 512)).astype(np.float32)
    emb = np.stack([unit(rng, 8), unit(rng, 8), np.zeros(8, np.float32)])
    p = M.forward(bundle, feats, emb)
    assert p.shape == (3, 20, 3) and p.dtype == np.float32
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    # batched and single-sequence calls agree
    np.testing.assert_allclose(M.forward(bundle, feats[1], emb[1]), p[1], atol=1e-6)


@pytest.mark.parametrize("variant", ["film", "prenet", "combined"])
def test_film_is_identity_at_init(variant):
    cfg = tiny_config(variant)
    bundle = M.build_model(cfg, 2)
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((1, 15, 512)).astype(np.float32)
    emb = unit(rng, 8)[None]
    gamma, beta = M.film_generate(bundle, rng.standard_normal(cfg.conditioner_dim))
    np.testing.assert_array_equal(gamma, 1.0)
    np.testing.assert_array_equal(beta, 0.0)
    # ablated model: classifier straight on the conformer output
    _, cache, _ = M._network_forward(bundle.tensors, cfg, feats, emb)
    t = bundle.tensors
    ablated = L.softmax(L.linear(cache["h"], t["classifier.weight"], t["classifier.bias"]))
    np.testing.assert_array_equal(M.forward(bundle, feats, emb), ablated)


def test_film_generate_is_affine():
    cfg = tiny_config("combined")
    params = M.build_model(cfg, 0).tensors.copy()
    rng = np.random.default_rng(5)
    for name in ("film.gamma.weight", "film.beta.weight", "film.gamma.bias", "film.beta.bias"):
        params[name] = rng.standard_normal(params[name].shape).astype(np.float32)
    a, b = rng.standard_normal((2, cfg.conditioner_dim))
    zero = np.zeros(cfg.conditioner_dim)
    ga, ba = M.film_generate(params, a)
    gb, bb = M.film_generate(params, b)
    gab, bab = M.film_generate(params, a + b)
    g0, b0 = M.film_generate(params, zero)
    np.testing.assert_allclose(gab, ga + gb - g0, atol=1e-5)
    np.testing.assert_allclose(bab, ba + bb - b0, atol=1e-5)
    np.testing.assert_array_equal(g0, params["film.gamma.bias"])
    np.testing.assert_array_equal(b0, params["film.beta.bias"])
    with pytest.raises(ContractError):
        M.film_generate(params, np.zeros(3))
    with pytest.raises(ContractError):
        M.film_generate(M.build_model(tiny_config("concat")), np.zeros(8))


def test_cosine_scores_stubbed_prenet():
    rng = np.random.default_rng(2)
    target = unit(rng, 8)
    frames = np.tile(target * 3.0, (5, 1))
    np.testing.assert_allclose(M.cosine_scores(frames, target), 1.0, atol=1e-6)
    np.testing.assert_allclose(M.cosine_scores(-frames, target), -1.0, atol=1e-6)
    np.testing.assert_array_equal(M.cosine_scores(frames, np.zeros(8, np.float32)), 0.0)


def test_prenet_similarity():
    bundle = M.build_model(tiny_config("prenet"), 0)
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((12, 512)).astype(np.float32)
    s = M.prenet_similarity(bundle, feats, unit(rng, 8))
    assert s.shape == (12,) and np.all(np.abs(s) <= 1 + 1e-6)
    np.testing.assert_array_equal(M.prenet_similarity(bundle, feats, np.zeros(8)), 0.0)
    for variant in ("concat", "film"):
        with pytest.raises(ContractError):
            M.prenet_similarity(M.build_model(tiny_config(variant)), feats, unit(rng, 8))


def test_concat_zero_embedding_ignores_embedding_columns():
    cfg = tiny_config("concat")
    bundle = M.build_model(cfg, 0)
    other = bundle.copy()
    rng = np.random.default_rng(4)
    w = other.tensors["backbone.in_proj.weight"]
    w[512:] = rng.standard_normal(w[512:].shape).astype(np.float32)
    feats = rng.standard_normal((10, 512)).astype(np.float32)
    zero = np.zeros(8, np.float32)
    np.testing.assert_array_equal(M.forward(bundle, feats, zero), M.forward(other, feats, zero))
    e = unit(rng, 8)
    assert not np.array_equal(M.forward(bundle, feats, e), M.forward(other, feats, e))


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_receptive_field_bound(variant):
    cfg = tiny_config(variant)
    r = cfg.receptive_field  # 2 * (4 + 3 - 1) = 12
    bundle = M.build_model(cfg, 6)
    rng = np.random.default_rng(7)
    t_len = r + 8
    feats = rng.standard_normal((t_len, 512)).astype(np.float32)
    emb = unit(rng, 8)
    base = M.forward(bundle, feats, emb)
    t = t_len - 1
    far = feats.copy()
    far[: t - r] += rng.standard_normal((t - r, 512)).astype(np.float32)
    assert M.forward(bundle, far, emb)[t].tobytes() == base[t].tobytes()
    edge = feats.copy()
    edge[t - r] += 1.0
    assert not np.array_equal(M.forward(bundle, edge, emb)[t], base[t])
    future = feats.copy()
    future[t] += 1.0
    assert M.forward(bundle, future, emb)[:t].tobytes() == base[:t].tobytes()


def test_input_validation():
    bundle = M.build_model(tiny_config("film"), 0)
    with pytest.raises(ContractError):
        M.forward(bundle, np.zeros((4, 100)), np.zeros(8))
    with pytest.raises(ContractError):
        M.forward(bundle, np.zeros((4, 512)), np.zeros(5))


def test_classify_frame_threshold():
    assert M.classify_frame([0.05, 0.9, 0.05]) is M.Decision.SUPPRESS
    assert M.classify_frame([0.1, 0.8, 0.1]) is M.Decision.PASS
    assert M.classify_frame([1.0, 0.0, 0.0]) is M.Decision.PASS
    p = np.array([[0.05, 0.5, 0.45], [0.1, 0.0, 0.9], [0.7, 0.2, 0.1]])
    assert M.decisions(p).tolist() == [False, True, True]
    assert M.decisions(p, threshold=0.5).tolist() == [False, False, True]


def test_loss_gradient_matches_logit_formula():
    # gradient of softmax+CE w.r.t. logits is p - onehot
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)

    def loss(p, _):
        q = L.softmax(p["z"])
        return float(-np.log(q[np.arange(6), y]).mean())

    analytic = L.softmax(z) - np.eye(3)[y]
    assert L.finite_difference_check(loss, {"z": z}, None, ({"z": analytic / 6}, None)) < 1e-6
