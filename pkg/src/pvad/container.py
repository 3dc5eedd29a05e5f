"""Binary model container.

Layout (all integers unsigned 32-bit little-endian)::

    magic      b"PVAD2\\0"
    version    u32
    config     u32 length + UTF-8 JSON (sorted keys)
    count      u32 number of tensors
    tensor*    u32 name length, name, u8 dtype (0 = float32, 1 = int8),
               u32 rank, rank x u32 dims, [f32 scale iff int8], raw LE payload
    checksum   u32 CRC-32 of every preceding byte

Serialization is canonical (tensor order follows the model's parameter
layout), so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, LoadError
from .model import ModelBundle, ModelConfig, is_weight, param_specs
from .quant import QuantizedBundle, QuantizedTensor

MAGIC = b"PVAD2\0"
VERSION = 1
DTYPE_F32, DTYPE_I8 = 0, 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def to_bytes(bundle: ModelBundle | QuantizedBundle) -> bytes:
    quantized = isinstance(bundle, QuantizedBundle)
    header = {"kind": "quantized" if quantized else "float", "model": bundle.config.to_dict()}
    config = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    if quantized:
        names = bundle.names()
    else:
        order = [n for n, _, _ in param_specs(bundle.config)]
        names = [n for n in order if n in bundle.tensors] + sorted(set(bundle.tensors) - set(order))
    out = [MAGIC, _u32(VERSION), _u32(len(config)), config, _u32(len(names))]
    for name in names:
        raw = name.encode()
        out += [_u32(len(raw)), raw]
        if quantized and name in bundle.weights:
            qt = bundle.weights[name]
            out += [bytes([DTYPE_I8]), _u32(qt.q_values.ndim)] + [_u32(d) for d in qt.q_values.shape]
            out += [struct.pack("<f", float(qt.scale)), np.ascontiguousarray(qt.q_values, dtype=np.int8).tobytes()]
        else:
            t = bundle.floats[name] if quantized else bundle.tensors[name]
            out += [bytes([DTYPE_F32]), _u32(t.ndim)] + [_u32(d) for d in t.shape]
            out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + _u32(zlib.crc32(body))


def save_model(bundle: ModelBundle | QuantizedBundle, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(bundle))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise LoadError(field, f"truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]


def from_bytes(data: bytes) -> ModelBundle | QuantizedBundle:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise LoadError("magic", "not a PVAD2 model container")
    version = r.u32("version")
    if version != VERSION:
        raise LoadError("version", f"unsupported format version {version} (expected {VERSION})")
    raw_config = r.take(r.u32("config.length"), "config")
    try:
        header = json.loads(raw_config.decode())
        kind = header["kind"]
        config = ModelConfig.from_dict(header["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LoadError("config", f"unparseable config block ({exc})") from exc
    except ConfigurationError as exc:
        raise LoadError("config", str(exc)) from exc
    if kind not in ("float", "quantized"):
        raise LoadError("config", f"unknown bundle kind {kind!r}")

    expected = {n: s for n, s, _ in param_specs(config)}
    count = r.u32("tensor_count")
    if count != len(expected):
        raise LoadError("tensor_count", f"{count} tensors, config implies {len(expected)}")
    floats, weights = {}, {}
    for i in range(count):
        try:
            name = r.take(r.u32(f"tensor[{i}].name_length"), f"tensor[{i}].name").decode()
        except UnicodeDecodeError as exc:
            raise LoadError(f"tensor[{i}].name", "name is not valid UTF-8") from exc
        if name not in expected:
            raise LoadError(f"tensor[{i}].name", f"unexpected tensor {name!r}")
        if name in floats or name in weights:
            raise LoadError(f"tensor[{i}].name", f"duplicate tensor {name!r}")
        dtype = r.take(1, f"{name}.dtype")[0]
        want_i8 = kind == "quantized" and is_weight(name)
        if dtype not in (DTYPE_F32, DTYPE_I8) or (dtype == DTYPE_I8) != want_i8:
            raise LoadError(f"{name}.dtype", f"dtype tag {dtype} invalid for this {kind} bundle")
        rank = r.u32(f"{name}.rank")
        if rank != len(expected[name]):
            raise LoadError(f"{name}.rank", f"rank {rank}, expected {len(expected[name])}")
        shape = tuple(r.u32(f"{name}.dims") for _ in range(rank))
        if shape != expected[name]:
            raise LoadError(f"{name}.shape", f"shape {shape}, expected {expected[name]}")
        size = int(np.prod(shape))
        if dtype == DTYPE_I8:
            scale = np.float32(struct.unpack("<f", r.take(4, f"{name}.scale"))[0])
            if not np.isfinite(scale) or scale <= 0:
                raise LoadError(f"{name}.scale", f"scale must be positive and finite, got {scale}")
            q = np.frombuffer(r.take(size, f"{name}.payload"), dtype=np.int8).reshape(shape).copy()
            weights[name] = QuantizedTensor(q, scale)
        else:
            floats[name] = np.frombuffer(r.take(4 * size, f"{name}.payload"), dtype="<f4").reshape(shape).astype(np.float32)
    body_end = r.pos
    stored = r.u32("checksum")
    if r.pos != len(data):
        raise LoadError("checksum", f"{len(data) - r.pos} trailing bytes after checksum")
    if stored != zlib.crc32(data[:body_end]):
        raise LoadError("checksum", "CRC-32 mismatch; file is corrupt")
    if kind == "quantized":
        return QuantizedBundle(config, weights, floats)
    return ModelBundle(config, floats)


def load_model(path: str | Path) -> ModelBundle | QuantizedBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError("path", f"cannot read {path}: {exc.strerror}") from exc
    return from_bytes(data)
