"""Symmetric per-tensor int8 dynamic-range weight quantization.

Weights are stored as int8 with one float32 scale per tensor; biases and
norm parameters stay float32. Inference dequantizes on load and runs the
ordinary float forward, so activations stay floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import ModelBundle, ModelConfig, is_weight, param_specs

QMAX = 127


@dataclass(frozen=True)
class QuantizedTensor:
    q_values: np.ndarray  # int8
    scale: np.float32

    @property
    def shape(self) -> tuple[int, ...]:
        return self.q_values.shape


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


SCALE_BITS = 17  # 17 + 7 bits for |q| <= 127 fits the 24-bit float32 significand
_MIN_MAX_ABS = float(np.finfo(np.float32).tiny) * 128


def _scale_for(max_abs: float) -> np.float32:
    """float32 scale just below ``max_abs / 127``, truncated to ``SCALE_BITS`` significant bits.

    Rounding toward zero keeps ``|w| / scale`` at or above the exact ratio, so
    the extreme element clamps to +-127 and ``|w - q * scale| <= scale / 2``
    holds exactly. The short significand makes every ``q * scale`` exact in
    float32, so dequantize -> quantize reproduces the same scale and codes.
    Tensors whose magnitude is below ``_MIN_MAX_ABS`` are treated as zero.
    """
    if max_abs < _MIN_MAX_ABS:
        return np.float32(1.0)
    mant, exp = np.frexp(max_abs / QMAX)
    return np.float32(np.ldexp(np.floor(mant * 2.0**SCALE_BITS), int(exp) - SCALE_BITS))


def quantize_tensor(w: np.ndarray) -> QuantizedTensor:
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise InputError("cannot quantize a tensor with non-finite values")
    w64 = w.astype(np.float64)
    scale = _scale_for(float(np.max(np.abs(w64)))) if w.size else np.float32(1.0)
    q = np.clip(_round_half_away(w64 / np.float64(scale)), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(q, scale)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    """``q_values * scale``. Exact in float32 for scales produced by :func:`quantize_tensor`."""
    return (q.q_values.astype(np.float64) * np.float64(q.scale)).astype(dtype)


@dataclass
class QuantizedBundle:
    config: ModelConfig
    weights: dict[str, QuantizedTensor]
    floats: dict[str, np.ndarray]

    def dequantized(self) -> ModelBundle:
        tensors = {}
        for name in self.names():
            tensors[name] = dequantize(self.weights[name]) if name in self.weights else self.floats[name].copy()
        return ModelBundle(self.config, tensors)

    def names(self) -> list[str]:
        order = [n for n, _, _ in param_specs(self.config)]
        present = set(self.weights) | set(self.floats)
        return [n for n in order if n in present] + sorted(present - set(order))


@dataclass
class SizeReport:
    float_weight_bytes: int
    quantized_weight_bytes: int
    float_total_bytes: int
    quantized_total_bytes: int

    @property
    def weight_ratio(self) -> float:
        return self.float_weight_bytes / self.quantized_weight_bytes

    @property
    def total_ratio(self) -> float:
        return self.float_total_bytes / self.quantized_total_bytes

    def to_dict(self) -> dict:
        return {
            "float_weight_bytes": self.float_weight_bytes,
            "quantized_weight_bytes": self.quantized_weight_bytes,
            "weight_ratio": self.weight_ratio,
            "float_total_bytes": self.float_total_bytes,
            "quantized_total_bytes": self.quantized_total_bytes,
            "total_ratio": self.total_ratio,
        }


def quantize_model(bundle: ModelBundle) -> tuple[QuantizedBundle, SizeReport]:
    """Quantize every weight matrix / conv kernel; keep biases and norm params float.

    Byte counts are serialized tensor payloads: float32 = 4 B/element,
    int8 = 1 B/element + a 4-byte scale. ``total`` adds the float side-parameters.
    """
    weights, floats = {}, {}
    fw = qw = side = 0
    for name, t in bundle.tensors.items():
        if is_weight(name):
            weights[name] = quantize_tensor(t)
            fw += 4 * t.size
            qw += t.size + 4
        else:
            floats[name] = np.array(t, dtype=np.float32, copy=True)
            side += 4 * t.size
    return QuantizedBundle(bundle.config, weights, floats), SizeReport(fw, qw, fw + side, qw + side)
