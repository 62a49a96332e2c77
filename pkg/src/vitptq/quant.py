"""Uniform affine quantization: min/max calibration, integer codes, fake-quant.

Codes live in ``[0, 2**bits - 1]``; a value ``x`` maps to
``clip(round(x / s) + z, 0, 2**bits - 1)`` and back to ``s * (code - z)``.
Rounding is numpy's round-half-to-even.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ContractError
from .tensor import Tensor, record

MIN_SCALE = 1e-8
MIN_BITS, MAX_BITS = 2, 8

ArrayLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Scale / zero point for one quantized quantity.

    ``axis is None`` means per-tensor (``scale`` and ``zero_point`` are 0-d);
    otherwise there is one pair per index along ``axis``.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    axis: Optional[int] = None

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ContractError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        scale = np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.int64)
        if scale.shape != zp.shape:
            raise ContractError("scale and zero_point shapes differ")
        if self.axis is None and scale.ndim != 0:
            raise ContractError("per-tensor params need scalar scale/zero_point")
        if self.axis is not None and scale.ndim != 1:
            raise ContractError("per-channel params need 1-d scale/zero_point")
        if not np.all(scale > 0):
            raise ContractError("scale must be positive")
        if np.any(zp < 0) or np.any(zp > self.qmax):
            raise ContractError(f"zero_point outside [0, {self.qmax}]")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (self.bits == other.bits and self.axis == other.axis
                and np.array_equal(self.scale, other.scale) and np.array_equal(self.zero_point, other.zero_point))

    __hash__ = None

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def granularity(self) -> str:
        return "per-tensor" if self.axis is None else "per-channel"

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """Scale and zero point reshaped to broadcast against an ``ndim`` array."""
        if self.axis is None:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def representable_range(self, ndim: int = 0) -> tuple[np.ndarray, np.ndarray]:
        s, z = self.broadcast(ndim)
        return s * (0 - z), s * (self.qmax - z)


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> tuple:
        return self.codes.shape


def _data(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _params_from_range(lo: np.ndarray, hi: np.ndarray, bits: int, axis: Optional[int]) -> QuantParams:
    qmax = (1 << bits) - 1
    s = np.maximum((hi - lo) / qmax, MIN_SCALE)
    z = np.clip(np.round(-lo / s), 0, qmax).astype(np.int64)
    return QuantParams(s, z, bits, axis)


def calibrate(x: ArrayLike, bits: int) -> QuantParams:
    """Per-tensor params from the min/max of ``x``."""
    d = _data(x)
    if d.size == 0:
        raise ContractError("cannot calibrate on an empty tensor")
    if not np.all(np.isfinite(d)):
        raise ContractError("calibration input contains NaN/Inf")
    return _params_from_range(np.float64(d.min()), np.float64(d.max()), bits, None)


def calibrate_from_range(lo: float, hi: float, bits: int) -> QuantParams:
    """Per-tensor params from an already-reduced range (running min/max)."""
    return _params_from_range(np.float64(lo), np.float64(hi), bits, None)


def calibrate_per_channel(w: ArrayLike, bits: int, axis: int) -> QuantParams:
    """One (scale, zero point) per slice of ``w`` along ``axis``."""
    d = _data(w)
    if not -d.ndim <= axis < d.ndim:
        raise ContractError(f"axis {axis} invalid for tensor of rank {d.ndim}")
    if d.size == 0:
        raise ContractError("cannot calibrate on an empty tensor")
    axis = axis % d.ndim
    others = tuple(i for i in range(d.ndim) if i != axis)
    return _params_from_range(d.min(axis=others), d.max(axis=others), bits, axis)


def quantize(x: ArrayLike, qp: QuantParams) -> QuantizedTensor:
    d = _data(x)
    s, z = qp.broadcast(d.ndim)
    codes = np.clip(np.round(d / s) + z, 0, qp.qmax).astype(np.int64)
    return QuantizedTensor(codes, qp)


def dequantize(xq: QuantizedTensor) -> Tensor:
    s, z = xq.params.broadcast(xq.codes.ndim)
    return Tensor(s * (xq.codes - z))


def fake_quant(x: Tensor, qp: QuantParams) -> Tensor:
    """``dequantize(quantize(x))`` with a clipping-aware straight-through gradient.

    The gradient is passed through unchanged where ``x`` lies inside the
    representable range and zeroed where it saturates.
    """
    d = x.data
    s, z = qp.broadcast(d.ndim)
    out = s * (np.clip(np.round(d / s) + z, 0, qp.qmax) - z)
    lo, hi = s * (0 - z), s * (qp.qmax - z)

    def vjp(g):
        return (g * ((d >= lo) & (d <= hi)),)

    return record(out, (x,), vjp)
