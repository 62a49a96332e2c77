"""Versioned binary checkpoint for ``ViTModel``.

All integers little-endian; lengths are u64::

    magic         8 bytes  b"VPTQCKPT"
    version       u32      (1)
    config        u64 length + UTF-8 JSON object (sorted keys)
    mode          u32      (0 full precision, 1 fake-quantized)
    n_tensors     u64
    per tensor:
        name      u64 length + UTF-8
        ndim      u32, then ndim x u64 extents
        payload   float64 little-endian, row-major
        has_qp    u8; when 1 a quant-params record follows
    n_act         u64
    per activation site:
        name      u64 length + UTF-8
        quant-params record

    quant-params record:
        bits u32, axis i32 (-1 = per-tensor), count u64,
        count x f64 scales, count x i64 zero points
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import BadMagicError, ContractError, DataFormatError, TruncatedFileError
from .model import FP, QUANT, ModelConfig, ViTModel
from .quant import QuantParams
from .tensor import Tensor

MAGIC = b"VPTQCKPT"
VERSION = 1
_MODES = (FP, QUANT)


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u64(len(b)) + b


def _qp_bytes(qp: QuantParams) -> bytes:
    scale = np.atleast_1d(qp.scale)
    zp = np.atleast_1d(qp.zero_point)
    axis = -1 if qp.axis is None else qp.axis
    return (
        _u32(qp.bits) + struct.pack("<i", axis) + _u64(scale.size)
        + scale.astype("<f8").tobytes() + zp.astype("<i8").tobytes()
    )


def dumps(model: ViTModel) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_u32(VERSION))
    out.write(_str(json.dumps(model.config.to_dict(), sort_keys=True)))
    out.write(_u32(_MODES.index(model.mode)))
    out.write(_u64(len(model.params)))
    for name, t in model.params.items():
        out.write(_str(name))
        out.write(_u32(t.ndim))
        for n in t.shape:
            out.write(_u64(n))
        out.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        qp = model.weight_qp.get(name)
        out.write(b"\x01" + _qp_bytes(qp) if qp is not None else b"\x00")
    out.write(_u64(len(model.act_qp)))
    for site, qp in model.act_qp.items():
        out.write(_str(site))
        out.write(_qp_bytes(qp))
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes, src: str):
        self.raw = raw
        self.pos = 0
        self.src = src

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.src}: unexpected end of file at byte {self.pos}")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def string(self) -> str:
        n = self.unpack("<Q")
        if n > len(self.raw):
            raise DataFormatError(f"{self.src}: implausible string length {n}")
        return self.take(n).decode("utf-8")

    def qp(self) -> QuantParams:
        bits = self.unpack("<I")
        axis = self.unpack("<i")
        count = self.unpack("<Q")
        scale = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        zp = np.frombuffer(self.take(8 * count), dtype="<i8").astype(np.int64)
        if axis < 0:
            if count != 1:
                raise DataFormatError(f"{self.src}: per-tensor quant params with {count} entries")
            return QuantParams(scale[0], zp[0], bits, None)
        return QuantParams(scale, zp, bits, axis)


def loads(raw: bytes, src: str = "<bytes>") -> ViTModel:
    """Parse a checkpoint; any structural problem raises a ``DataFormatError``."""
    try:
        return _parse(raw, src)
    except ContractError as exc:  # invalid config or quant-param fields
        raise DataFormatError(f"{src}: {exc}") from None


def _parse(raw: bytes, src: str) -> ViTModel:
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{src}: not a checkpoint (bad magic)")
    r = _Reader(raw, src)
    r.take(len(MAGIC))
    version = r.unpack("<I")
    if version != VERSION:
        raise DataFormatError(f"{src}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(r.string()))
    except (json.JSONDecodeError, UnicodeDecodeError, TypeError) as exc:
        raise DataFormatError(f"{src}: bad config block ({exc})") from None
    mode_idx = r.unpack("<I")
    if mode_idx >= len(_MODES):
        raise DataFormatError(f"{src}: unknown mode {mode_idx}")
    params, wqp, aqp = {}, {}, {}
    for _ in range(r.unpack("<Q")):
        name = r.string()
        ndim = r.unpack("<I")
        shape = tuple(r.unpack("<Q") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        params[name] = Tensor(np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64))
        if r.take(1) == b"\x01":
            wqp[name] = r.qp()
    for _ in range(r.unpack("<Q")):
        site = r.string()
        aqp[site] = r.qp()
    if r.pos != len(raw):
        raise DataFormatError(f"{src}: {len(raw) - r.pos} trailing bytes")
    return ViTModel(config, params, _MODES[mode_idx], wqp, aqp)


def save_checkpoint(model: ViTModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path: Union[str, Path]) -> ViTModel:
    return loads(Path(path).read_bytes(), str(path))
