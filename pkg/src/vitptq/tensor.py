"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Usage::

    with Tape() as tape:
        w = tape.watch(Tensor([3.0]))
        loss = mse(w, Tensor([0.0]))
    grads = backward(tape, loss, [w])   # {w: array([6.])}

Operations only record onto the active tape when at least one input is
tracked by it, so plain inference never pays for graph bookkeeping.
Nodes are appended in creation order, which is already a topological order;
``backward`` walks them in reverse and visits each node once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Immutable n-d array. ``data`` must never be mutated in place."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=DTYPE)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: VJP


class Tape:
    """Single-writer record of differentiable operations.

    Enter it as a context manager to make it the active tape. Tapes nest;
    the innermost one records.
    """

    _stack: list = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._leaves.append(t)
        return tensors[0] if len(tensors) == 1 else tensors

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``out_data`` as a Tensor and register it on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (``None``
    for inputs that take no gradient). Custom differentiable ops in other
    modules go through here.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(id(t) in tape._tracked for t in inputs):
        tape._tracked.add(id(out))
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{tensor: gradient array}`` for every tensor in ``wrt`` (default:
    every watched leaf). Tensors the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets = list(tape._leaves if wrt is None else wrt)
    grads: dict[int, np.ndarray] = {}
    if tape.is_tracked(loss):
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or id(inp) not in tape._tracked:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


# ----------------------------------------------------------------------------
# Primitive ops
# ----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_trailing_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # Only trailing-dimension broadcasting (bias / positional add) is supported.
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    tail = big[len(big) - len(small):]
    if any(s != t and s != 1 for s, t in zip(small, tail)):
        raise DimensionError(f"{op}: cannot broadcast shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``a`` may carry leading batch axes.

    ``b`` is either a plain ``k x n`` matrix (shared weight) or has the same
    leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last axis of {x.shape}"
        )
    if not eps > 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return record(xhat * gd + beta.data, (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record(xd * cdf, (x,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference (scalar tensor)."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = max(diff.size, 1)
    c = 2.0 / n
    return record(np.asarray(np.sum(diff * diff) / n), (a, b), lambda g: (c * g * diff, -c * g * diff))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return record(a.data.mean(axis=axis), (a,), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / labels.size,)

    return record(np.asarray(loss), (logits,), vjp)
