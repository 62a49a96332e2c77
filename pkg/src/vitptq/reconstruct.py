"""Block-by-block reconstruction of a fake-quantized ViT with three fused losses.

For block ``l`` (0-based here) the objective is::

    fused = obwr + alpha * ebgs + beta * ibls

* ``obwr``: MSE between the full-precision and quantized block ``l`` outputs,
  both fed the full-precision output of block ``l - 1``.
* ``ebgs``: MSE between full-precision and quantized logits, with the
  quantized model run end to end in its current state.
* ``ibls``: mean over the block's six linear layers of the per-layer output
  MSE, computed from the same full-precision block input as ``obwr``.

Only block ``l``'s tensors are updated (Adam, straight-through gradients);
quantization scales and zero points stay frozen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import ContractError, DimensionError, NumericalError
from .model import (
    FP,
    QUANT,
    ViTModel,
    block_forward,
    block_param_names,
    embed,
    forward_from,
    model_forward,
    quantize_model,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, add, backward, mse, scale

logger = logging.getLogger(__name__)

BALANCE_FLOOR = 1e-12
BALANCE_CLAMP = (1e-4, 1e4)


@dataclass(frozen=True)
class LossBreakdown:
    obwr: float
    ebgs: float
    ibls: float
    alpha: float
    beta: float
    fused: float


@dataclass(frozen=True)
class ReconstructionConfig:
    iterations: int = 500
    lr: float = 1e-5
    batch_size: int = 32
    calib_size: int = 256
    seed: int = 0
    auto_balance: bool = True
    alpha: float = 1.0  # used only when auto_balance is False
    beta: float = 1.0
    use_obwr: bool = True
    use_ebgs: bool = True
    use_ibls: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    chunk: int = 64  # batch size for cache precomputation

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if not self.auto_balance and (self.alpha < 0 or self.beta < 0):
            raise ContractError("alpha and beta must be non-negative")

    @property
    def trains(self) -> bool:
        return self.iterations > 0 and (self.use_obwr or self.use_ebgs or self.use_ibls)


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------


def _check_block(model: ViTModel, l: int) -> None:
    if not 0 <= l < model.depth:
        raise ContractError(f"block index {l} out of range for depth {model.depth}")


def obwr_loss(fp: ViTModel, q: ViTModel, l: int, m_prev_fp) -> Tensor:
    """Block-``l`` output MSE with both models fed the full-precision input ``m_prev_fp``."""
    _check_block(fp, l)
    _check_block(q, l)
    x = m_prev_fp if isinstance(m_prev_fp, Tensor) else Tensor(m_prev_fp)
    ref, _ = block_forward(x, fp.block(l), FP)
    out, _ = block_forward(x, q.block(l), q.mode)
    return mse(ref, out)


def ebgs_loss(fp: ViTModel, q: ViTModel, images) -> Tensor:
    """MSE between the logits of ``fp`` and of ``q`` on the same batch."""
    return mse(model_forward(images, fp), model_forward(images, q))


def ibls_loss(fp_layer_outs: Sequence[Tensor], q_layer_outs: Sequence[Tensor]) -> Tensor:
    """Mean of per-layer output MSEs."""
    n = len(fp_layer_outs)
    if n == 0 or n != len(q_layer_outs):
        raise DimensionError(f"ibls: layer lists of length {n} and {len(q_layer_outs)}")
    total = None
    for a, b in zip(fp_layer_outs, q_layer_outs):
        e = mse(a, b)
        total = e if total is None else add(total, e)
    return scale(total, 1.0 / n)


def fuse_losses(obwr: float, ebgs: float, ibls: float, alpha: float, beta: float) -> LossBreakdown:
    vals = (obwr, ebgs, ibls)
    if not all(np.isfinite(v) for v in vals + (alpha, beta)):
        raise ContractError(f"non-finite loss component in {vals}, alpha={alpha}, beta={beta}")
    if min(vals) < 0:
        raise ContractError(f"negative loss component in {vals}")
    fused = obwr + alpha * ebgs + beta * ibls
    return LossBreakdown(obwr, ebgs, ibls, alpha, beta, fused)


def auto_balance(obwr0: float, ebgs0: float, ibls0: float) -> tuple[float, float]:
    """Block-wise weights that put EBGS and IBLS on the scale of OBWR."""
    lo, hi = BALANCE_CLAMP
    alpha = obwr0 / max(ebgs0, BALANCE_FLOOR)
    beta = obwr0 / max(ibls0, BALANCE_FLOOR)
    return float(np.clip(alpha, lo, hi)), float(np.clip(beta, lo, hi))


# ----------------------------------------------------------------------------
# Loss log
# ----------------------------------------------------------------------------

LOG_FIELDS = ("block", "iteration", "obwr", "ebgs", "ibls", "alpha", "beta", "fused")


@dataclass
class LossLog:
    rows: list = field(default_factory=list)  # (block, iteration, LossBreakdown)

    def append(self, block: int, iteration: int, lb: LossBreakdown) -> None:
        self.rows.append((block, iteration, lb))

    def fused(self, block: int) -> np.ndarray:
        return np.array([lb.fused for b, _, lb in self.rows if b == block])

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_FIELDS)
            for b, it, lb in self.rows:
                w.writerow([b, it] + [repr(getattr(lb, k)) for k in LOG_FIELDS[2:]])


# ----------------------------------------------------------------------------
# Algorithm
# ----------------------------------------------------------------------------


def _images(calib) -> np.ndarray:
    if isinstance(calib, Dataset):
        return calib.float_images()
    arr = np.asarray(calib, dtype=np.float64)
    if arr.ndim != 4 or len(arr) == 0:
        raise ContractError("calibration data must be a non-empty (B, C, H, W) batch")
    return arr


class FPCache:
    """Full-precision activations for every calibration image.

    ``trace[0]`` is the embedding output and ``trace[l + 1]`` the output of
    block ``l``; per-block layer outputs are computed on first use. The
    full-precision model never changes, so this is computed once per run.
    """

    def __init__(self, fp: ViTModel, images: np.ndarray, chunk: int = 64):
        self.fp = fp
        self.images = images
        self.chunk = chunk
        self.trace = [self._batched(lambda sl: embed(images[sl], fp).data)]
        for l in range(fp.depth):
            prev = self.trace[-1]
            self.trace.append(self._batched(lambda sl: block_forward(Tensor(prev[sl]), fp.block(l), FP)[0].data))
        self.logits = self._batched(lambda sl: forward_from(Tensor(self.trace[-1][sl]), fp, fp.depth).data)
        self._layers: dict[int, list] = {}

    def _batched(self, fn) -> np.ndarray:
        n = len(self.images)
        return np.concatenate([fn(slice(i, i + self.chunk)) for i in range(0, n, self.chunk)])

    def layer_outputs(self, l: int) -> list:
        if l not in self._layers:
            parts = [block_forward(Tensor(self.trace[l][i:i + self.chunk]), self.fp.block(l), FP)[1]
                     for i in range(0, len(self.images), self.chunk)]
            self._layers[l] = [np.concatenate([p[k].data for p in parts]) for k in range(len(parts[0]))]
        return self._layers[l]


def quant_block_inputs(q: ViTModel, images: np.ndarray, l: int, chunk: int = 64) -> np.ndarray:
    """Input of block ``l`` when the quantized model runs end to end."""
    outs = []
    for i in range(0, len(images), chunk):
        x = embed(images[i:i + chunk], q)
        for j in range(l):
            x, _ = block_forward(x, q.block(j), q.mode)
        outs.append(x.data)
    return np.concatenate(outs)


def block_objective(q: ViTModel, l: int, cache: FPCache, idx: np.ndarray,
                    q_in: Optional[np.ndarray]) -> tuple[Tensor, Tensor, Tensor]:
    """The three block-``l`` losses on calibration records ``idx``.

    ``q_in`` holds the quantized model's own block-``l`` inputs for EBGS;
    when it is ``None`` EBGS is skipped and returned as a constant 0.
    """
    out, layers = block_forward(Tensor(cache.trace[l][idx]), q.block(l), QUANT)
    obwr = mse(out, Tensor(cache.trace[l + 1][idx]))
    ibls = ibls_loss([Tensor(a[idx]) for a in cache.layer_outputs(l)], layers)
    if q_in is None:
        ebgs = Tensor(0.0)
    else:
        ebgs = mse(forward_from(Tensor(q_in[idx]), q, l), Tensor(cache.logits[idx]))
    return obwr, ebgs, ibls


def reconstruct_block(l: int, fp: ViTModel, q: ViTModel, calib, config: ReconstructionConfig,
                      cache: Optional[FPCache] = None, log: Optional[LossLog] = None) -> ViTModel:
    """Optimize block ``l`` of ``q`` for ``config.iterations`` steps.

    Returns a new model; ``q`` itself is not mutated. Tensors outside block
    ``l`` are shared with ``q`` unchanged.
    """
    _check_block(q, l)
    if q.mode != QUANT:
        raise ContractError("reconstruct_block needs a fake-quantized model")
    q = q.copy()
    if config.iterations == 0:
        return q
    images = _images(calib)
    if config.batch_size > len(images):
        raise ContractError(f"batch size {config.batch_size} exceeds calibration size {len(images)}")
    cache = cache if cache is not None else FPCache(fp, images, config.chunk)

    q_in = quant_block_inputs(q, images, l, config.chunk) if config.use_ebgs or config.auto_balance else None
    names = block_param_names(l)
    rng = np.random.default_rng([config.seed, l])
    state = AdamState(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    on = (float(config.use_obwr), float(config.use_ebgs), float(config.use_ibls))
    alpha, beta = (None, None) if config.auto_balance else (config.alpha, config.beta)

    for t in range(config.iterations):
        idx = rng.choice(len(images), size=config.batch_size, replace=False)
        with Tape() as tape:
            watched = [tape.watch(q.params[n]) for n in names]
            obwr, ebgs, ibls = block_objective(q, l, cache, idx, q_in if config.use_ebgs or alpha is None else None)
            parts = (obwr.item(), ebgs.item(), ibls.item())
            if not all(np.isfinite(parts)):
                raise NumericalError(f"block {l}: non-finite loss {parts} at iteration {t} (seed {config.seed})")
            if alpha is None:
                alpha, beta = auto_balance(*parts)
            lb = fuse_losses(on[0] * parts[0], on[1] * parts[1], on[2] * parts[2], alpha, beta)
            total = add(add(scale(obwr, on[0]), scale(ebgs, on[1] * alpha)), scale(ibls, on[2] * beta))
        if not np.isfinite(lb.fused):
            raise NumericalError(f"block {l}: fused loss overflowed at iteration {t} (seed {config.seed})")
        if log is not None:
            log.append(l, t, lb)
        g = backward(tape, total, watched)
        arrays = {n: q.params[n].data for n in names}
        new = adam_step(arrays, {n: g[w] for n, w in zip(names, watched)}, state, config.lr)
        for n in names:
            q.params[n] = Tensor(new[n])
    logger.info("block %d: final fused %.4g (alpha %.3g, beta %.3g)", l, lb.fused, alpha, beta)
    return q


def run_mgrq(fp: ViTModel, calib, config: ReconstructionConfig = ReconstructionConfig(),
             bits: Optional[tuple[int, int]] = None, log: Optional[LossLog] = None) -> ViTModel:
    """Calibrate a quantized copy of ``fp`` then reconstruct its blocks in order.

    ``bits`` is ``(weight_bits, activation_bits)`` for the encoder blocks;
    embedding and head keep the widths in ``fp.config``.
    """
    if fp.mode != FP:
        raise ContractError("run_mgrq expects a full-precision model")
    images = _images(calib)
    mcfg = fp.config.with_bits(*bits) if bits else fp.config
    q = quantize_model(fp, images, mcfg, config.chunk)
    if not config.trains:
        return q
    cache = FPCache(fp, images, config.chunk)
    for l in range(fp.depth):
        q = reconstruct_block(l, fp, q, images, config, cache, log)
    return q


def arm_config(base: ReconstructionConfig, obwr: bool, ebgs: bool, ibls: bool, seed: int) -> ReconstructionConfig:
    return replace(base, use_obwr=obwr, use_ebgs=ebgs, use_ibls=ibls, seed=seed)
