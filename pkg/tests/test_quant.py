import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvad import model as M
from pvad import quant as Q
from pvad.errors import InputError

from conftest import tiny_config, unit

finite32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)


def test_worked_example():
    qt = Q.quantize_tensor(np.array([-1.0, 0.5, 0.25], np.float32))
    assert qt.q_values.tolist() == [-127, 64, 32]
    assert qt.q_values.dtype == np.int8
    assert float(qt.scale) == pytest.approx(1 / 127, rel=1e-6)


def test_zero_tensor():
    qt = Q.quantize_tensor(np.zeros((3, 4), np.float32))
    assert qt.scale == 1.0 and not np.any(qt.q_values)
    np.testing.assert_array_equal(Q.dequantize(qt), 0.0)


def test_lattice_points_round_trip():
    s = Q.quantize_tensor(np.array([0.3], np.float32)).scale
    w = (np.arange(-127, 128) * np.float64(s)).astype(np.float32)
    qt = Q.quantize_tensor(w)
    assert qt.q_values.tolist() == list(range(-127, 128))


def test_dequantize_is_exact_in_float32():
    rng = np.random.default_rng(4)
    for _ in range(50):
        qt = Q.quantize_tensor((rng.standard_normal(300) * 10 ** rng.uniform(-6, 6)).astype(np.float32))
        np.testing.assert_array_equal(Q.dequantize(qt).astype(np.float64), Q.dequantize(qt, np.float64))


def test_negligible_tensor_is_zero():
    qt = Q.quantize_tensor(np.array([1e-40, -3e-39], np.float32))
    assert qt.scale == 1.0 and not np.any(qt.q_values)


def test_dequantize_constant():
    qt = Q.QuantizedTensor(np.full(5, -127, np.int8), np.float32(0.02))
    np.testing.assert_array_equal(Q.dequantize(qt, np.float64), -127 * np.float64(np.float32(0.02)))


def test_nonfinite_rejected():
    with pytest.raises(InputError):
        Q.quantize_tensor(np.array([1.0, np.inf]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 64), elements=finite32))
def test_error_bound_and_idempotence(w):
    qt = Q.quantize_tensor(w)
    assert np.all(np.abs(qt.q_values.astype(np.int16)) <= 127)
    err = np.abs(w.astype(np.float64) - Q.dequantize(qt, np.float64))
    assert np.all(err <= np.float64(qt.scale) / 2)
    once = Q.dequantize(qt)
    again = Q.dequantize(Q.quantize_tensor(once))
    np.testing.assert_array_equal(again, once)


def test_model_quantization_layout():
    bundle = M.build_model(M.ModelConfig(variant="combined"), 0)
    qb, report = Q.quantize_model(bundle)
    weights = {n for n in bundle.tensors if M.is_weight(n)}
    assert set(qb.weights) == weights
    assert set(qb.floats) == set(bundle.tensors) - weights
    assert all(v.dtype == np.float32 for v in qb.floats.values())
    assert report.weight_ratio >= 3.8
    assert report.float_weight_bytes == 4 * sum(bundle.tensors[n].size for n in weights)


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_quantized_drift_is_small(variant):
    bundle = M.build_model(M.ModelConfig(variant=variant), 3)
    deq = Q.quantize_model(bundle)[0].dequantized()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        feats = rng.standard_normal((int(rng.integers(5, 30)), 512)).astype(np.float32)
        emb = unit(rng, 256)
        worst = max(worst, float(np.abs(M.forward(bundle, feats, emb) - M.forward(deq, feats, emb)).max()))
    assert worst < 0.05


def test_quantization_order_independent():
    bundle = M.build_model(tiny_config("film"), 1)
    a = Q.quantize_model(bundle)[0]
    reordered = M.ModelBundle(bundle.config, dict(reversed(list(bundle.tensors.items()))))
    b = Q.quantize_model(reordered)[0]
    for n in a.weights:
        assert a.weights[n].q_values.tobytes() == b.weights[n].q_values.tobytes()
        assert a.weights[n].scale == b.weights[n].scale
