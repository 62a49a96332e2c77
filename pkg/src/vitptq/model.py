"""Toy Vision Transformer with optional fake quantization.

Layout: patch embedding (+ learned positional embedding) -> ``depth``
pre-norm encoder blocks -> mean pool over tokens -> linear head. There is no
class token.

In ``"quant"`` mode every linear weight is fake-quantized per output channel
and every activation site (input of each linear layer plus the post-softmax
attention probabilities) is fake-quantized per tensor with frozen params.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .quant import calibrate, calibrate_from_range, calibrate_per_channel, fake_quant
from .tensor import (
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)

FP = "fp"
QUANT = "quant"

# Order of the intra-block linear layers whose outputs are reported by block_forward.
LAYER_NAMES = ("q", "k", "v", "o", "fc1", "fc2")
# Activation fake-quant sites inside a block.
BLOCK_ACT_SITES = ("qkv_in", "probs", "o_in", "fc1_in", "fc2_in")

Observer = Callable[[str, np.ndarray], None]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_dim: int = 128
    num_classes: int = 10
    pos_embed: bool = True
    block_w_bits: int = 4
    block_a_bits: int = 4
    embed_w_bits: int = 8
    embed_a_bits: int = 8
    head_w_bits: int = 8
    head_a_bits: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ContractError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        for f in fields(self):
            if f.name.endswith("_bits") and not 2 <= getattr(self, f.name) <= 8:
                raise ContractError(f"{f.name} must be in [2, 8]")
        if self.depth < 0:
            raise ContractError("depth must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_bits(self, w_bits: int, a_bits: int) -> "ModelConfig":
        d = self.to_dict()
        d.update(block_w_bits=w_bits, block_a_bits=a_bits)
        return ModelConfig(**d)


def block_param_names(l: int) -> list[str]:
    p = f"blocks.{l}."
    return [
        p + n
        for n in (
            "ln1.g", "ln1.b", "attn.q.w", "attn.k.w", "attn.v.w", "attn.o.w",
            "ln2.g", "ln2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b",
        )
    ]


# Param-name suffix -> BlockParams field.
_BLOCK_FIELDS = {
    "ln1.g": "ln1_g", "ln1.b": "ln1_b",
    "attn.q.w": "w_q", "attn.k.w": "w_k", "attn.v.w": "w_v", "attn.o.w": "w_o",
    "ln2.g": "ln2_g", "ln2.b": "ln2_b",
    "mlp.fc1.w": "w_1", "mlp.fc1.b": "b_1", "mlp.fc2.w": "w_2", "mlp.fc2.b": "b_2",
}
_QUANT_WEIGHTS = ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2")


@dataclass
class BlockParams:
    """Tensors of one encoder block plus its quantization params.

    ``weight_qp`` is keyed by field name (``"w_q"``, ...), ``act_qp`` by
    activation site (see ``BLOCK_ACT_SITES``).
    """

    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    heads: int = 1
    eps: float = 1e-5
    weight_qp: dict = field(default_factory=dict)
    act_qp: dict = field(default_factory=dict)
    name: str = "block"

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f) for f in _BLOCK_FIELDS.values()]


@dataclass
class ViTModel:
    config: ModelConfig
    params: dict  # name -> Tensor, insertion order is the canonical order
    mode: str = FP
    weight_qp: dict = field(default_factory=dict)  # param name -> QuantParams
    act_qp: dict = field(default_factory=dict)  # site name -> QuantParams

    def __post_init__(self):
        if self.mode not in (FP, QUANT):
            raise ContractError(f"unknown mode {self.mode!r}")

    @property
    def depth(self) -> int:
        return self.config.depth

    def block(self, l: int) -> BlockParams:
        """View of block ``l`` (0-based). Tensors are shared, not copied."""
        if not 0 <= l < self.depth:
            raise ContractError(f"block index {l} out of range for depth {self.depth}")
        prefix = f"blocks.{l}."
        kw = {fld: self.params[prefix + suffix] for suffix, fld in _BLOCK_FIELDS.items()}
        wqp, aqp = {}, {}
        if self.mode == QUANT:
            for suffix, fld in _BLOCK_FIELDS.items():
                if prefix + suffix in self.weight_qp:
                    wqp[fld] = self.weight_qp[prefix + suffix]
            for site in BLOCK_ACT_SITES:
                aqp[site] = self.act_qp[prefix + site]
        return BlockParams(
            **kw, heads=self.config.heads, eps=self.config.ln_eps,
            weight_qp=wqp, act_qp=aqp, name=f"blocks.{l}",
        )

    def copy(self) -> "ViTModel":
        # Tensors are immutable, so sharing them is safe; only containers are copied.
        return ViTModel(self.config, dict(self.params), self.mode, dict(self.weight_qp), dict(self.act_qp))


# ----------------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------------


def init_model(config: ModelConfig, seed: int = 0) -> ViTModel:
    rng = np.random.default_rng(seed)
    D, H = config.embed_dim, config.mlp_dim

    def linear(fan_in, fan_out):
        # truncated normal, std 0.02, cut at 2 std (standard ViT init)
        w = rng.normal(0.0, 0.02, size=(fan_in, fan_out))
        return Tensor(np.clip(w, -0.04, 0.04))

    params: dict = {}
    params["patch.w"] = linear(config.patch_dim, D)
    params["patch.b"] = Tensor(np.zeros(D))
    if config.pos_embed:
        params["pos"] = Tensor(rng.normal(0.0, 0.02, size=(config.num_patches, D)))
    for l in range(config.depth):
        p = f"blocks.{l}."
        params[p + "ln1.g"] = Tensor(np.ones(D))
        params[p + "ln1.b"] = Tensor(np.zeros(D))
        for n in "qkvo":
            params[p + f"attn.{n}.w"] = linear(D, D)
        params[p + "ln2.g"] = Tensor(np.ones(D))
        params[p + "ln2.b"] = Tensor(np.zeros(D))
        params[p + "mlp.fc1.w"] = linear(D, H)
        params[p + "mlp.fc1.b"] = Tensor(np.zeros(H))
        params[p + "mlp.fc2.w"] = linear(H, D)
        params[p + "mlp.fc2.b"] = Tensor(np.zeros(D))
    params["head.w"] = linear(D, config.num_classes)
    params["head.b"] = Tensor(np.zeros(config.num_classes))
    return ViTModel(config, params)


# ----------------------------------------------------------------------------
# Forward pieces
# ----------------------------------------------------------------------------


def _w(block: BlockParams, fld: str, quantized: bool) -> Tensor:
    t = getattr(block, fld)
    return fake_quant(t, block.weight_qp[fld]) if quantized else t


def _act(x: Tensor, site: str, qps: dict, quantized: bool, observer: Optional[Observer], name: str) -> Tensor:
    if observer is not None:
        observer(f"{name}.{site}", x.data)
    return fake_quant(x, qps[site]) if quantized else x


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, num_patches, C*patch*patch)``, row-major patch order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * patch * patch)


def _check_images(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    expect = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise DimensionError(f"expected images of shape (B, {expect[0]}, {expect[1]}, {expect[2]}), got {images.shape}")
    return images


def patch_embed(images, model: ViTModel, observer: Optional[Observer] = None) -> Tensor:
    """Flatten patches, project to ``embed_dim`` and add positional embedding.

    Accepts a single ``(C, H, W)`` image (returns ``(N, D)``) or a batch
    ``(B, C, H, W)`` (returns ``(B, N, D)``).
    """
    cfg = model.config
    raw = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = raw.ndim == 3
    imgs = _check_images(raw[None] if single else raw, cfg)
    x = Tensor(extract_patches(imgs, cfg.patch_size))
    q = model.mode == QUANT
    if observer is not None:
        observer("patch.in", x.data)
    w, pos = model.params["patch.w"], model.params.get("pos")
    if q:
        x = fake_quant(x, model.act_qp["patch.in"])
        w = fake_quant(w, model.weight_qp["patch.w"])
        pos = fake_quant(pos, model.weight_qp["pos"]) if pos is not None else None
    out = add(matmul(x, w), model.params["patch.b"])
    if pos is not None:
        out = add(out, pos)
    return reshape(out, out.shape[1:]) if single else out


def _linear_check(x: Tensor, block: BlockParams) -> None:
    d = block.w_q.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"{block.name}: token width {x.shape[-1]} != embed dim {d}")


def msa_forward(x: Tensor, block: BlockParams, quantized: bool = False,
                observer: Optional[Observer] = None, layer_outputs: Optional[list] = None) -> Tensor:
    """Multi-head self-attention on already-normalized tokens ``x`` (``[B,] N x D``).

    Appends the q, k, v and output-projection results to ``layer_outputs``
    when given.
    """
    _linear_check(x, block)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, N, D = x.shape
    h = block.heads
    dh = D // h
    aq = block.act_qp
    xin = _act(x, "qkv_in", aq, quantized, observer, block.name)
    q = matmul(xin, _w(block, "w_q", quantized))
    k = matmul(xin, _w(block, "w_k", quantized))
    v = matmul(xin, _w(block, "w_v", quantized))

    def heads(t):
        return transpose(reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

    scores = scale(matmul(heads(q), transpose(heads(k), (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = _act(softmax_lastdim(scores), "probs", aq, quantized, observer, block.name)
    ctx = reshape(transpose(matmul(probs, heads(v)), (0, 2, 1, 3)), (B, N, D))
    ctx = _act(ctx, "o_in", aq, quantized, observer, block.name)
    out = matmul(ctx, _w(block, "w_o", quantized))
    if layer_outputs is not None:
        layer_outputs.extend([q, k, v, out])
    if squeeze:
        out = reshape(out, (N, D))
    return out


def mlp_forward(y: Tensor, block: BlockParams, quantized: bool = False,
                observer: Optional[Observer] = None, layer_outputs: Optional[list] = None) -> Tensor:
    """``GELU(y W1 + b1) W2 + b2`` on already-normalized tokens."""
    _linear_check(y, block)
    aq = block.act_qp
    yin = _act(y, "fc1_in", aq, quantized, observer, block.name)
    h1 = add(matmul(yin, _w(block, "w_1", quantized)), block.b_1)
    hin = _act(gelu(h1), "fc2_in", aq, quantized, observer, block.name)
    out = add(matmul(hin, _w(block, "w_2", quantized)), block.b_2)
    if layer_outputs is not None:
        layer_outputs.extend([h1, out])
    return out


def block_forward(x: Tensor, block: BlockParams, mode: str = FP,
                  observer: Optional[Observer] = None) -> tuple[Tensor, list]:
    """One pre-norm encoder block.

    Returns the block output and the outputs of its six linear layers in the
    order q, k, v, out-proj, fc1, fc2.
    """
    quantized = mode == QUANT
    if quantized and len(block.weight_qp) < len(_QUANT_WEIGHTS):
        raise ContractError(f"{block.name}: quant mode requires weight params for every linear layer")
    outs: list = []
    y = add(x, msa_forward(layer_norm(x, block.ln1_g, block.ln1_b, block.eps), block, quantized, observer, outs))
    z = add(y, mlp_forward(layer_norm(y, block.ln2_g, block.ln2_b, block.eps), block, quantized, observer, outs))
    return z, outs


def embed(images, model: ViTModel, observer: Optional[Observer] = None) -> Tensor:
    """Tokens entering the first block (the ``m_0`` of the block trace)."""
    return patch_embed(_check_images(images, model.config), model, observer)


def head_forward(tokens: Tensor, model: ViTModel, observer: Optional[Observer] = None) -> Tensor:
    pooled = mean_axis(tokens, 1)
    w = model.params["head.w"]
    if observer is not None:
        observer("head.in", pooled.data)
    if model.mode == QUANT:
        pooled = fake_quant(pooled, model.act_qp["head.in"])
        w = fake_quant(w, model.weight_qp["head.w"])
    return add(matmul(pooled, w), model.params["head.b"])


def forward_from(tokens: Tensor, model: ViTModel, start: int, observer: Optional[Observer] = None) -> Tensor:
    """Run blocks ``start..depth-1`` and the head on ``tokens``."""
    x = tokens
    for l in range(start, model.depth):
        x, _ = block_forward(x, model.block(l), model.mode, observer)
    return head_forward(x, model, observer)


def model_forward(images, model: ViTModel, observer: Optional[Observer] = None) -> Tensor:
    """Logits ``(B, num_classes)`` for a ``(B, C, H, W)`` float image batch."""
    return forward_from(embed(images, model, observer), model, 0, observer)


def block_outputs_trace(images, model: ViTModel) -> list[Tensor]:
    """Post-block activations ``m_1 .. m_L`` (index ``l`` is block ``l``'s output)."""
    x = embed(images, model)
    trace = []
    for l in range(model.depth):
        x, _ = block_forward(x, model.block(l), model.mode)
        trace.append(x)
    return trace


# ----------------------------------------------------------------------------
# Quantized model construction
# ----------------------------------------------------------------------------


class RangeObserver:
    """Running min/max per activation site."""

    def __init__(self):
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}

    def __call__(self, site: str, x: np.ndarray) -> None:
        lo, hi = float(x.min()), float(x.max())
        self.lo[site] = min(lo, self.lo.get(site, lo))
        self.hi[site] = max(hi, self.hi.get(site, hi))


def weight_bits(config: ModelConfig, name: str) -> int:
    if name.startswith("blocks."):
        return config.block_w_bits
    if name.startswith("head."):
        return config.head_w_bits
    return config.embed_w_bits


def act_bits(config: ModelConfig, site: str) -> int:
    if site.startswith("blocks."):
        return config.block_a_bits
    if site.startswith("head."):
        return config.head_a_bits
    return config.embed_a_bits


def quantized_weight_names(config: ModelConfig) -> list[str]:
    names = ["patch.w"] + (["pos"] if config.pos_embed else [])
    for l in range(config.depth):
        p = f"blocks.{l}."
        names += [p + f"attn.{n}.w" for n in "qkvo"] + [p + "mlp.fc1.w", p + "mlp.fc2.w"]
    return names + ["head.w"]


def quantize_model(fp: ViTModel, calib_images: np.ndarray, config: Optional[ModelConfig] = None,
                   batch_size: int = 64) -> ViTModel:
    """Calibrate a fake-quantized copy of ``fp``.

    Weights get per-output-channel params from their own min/max (the
    positional embedding is per-tensor); activation params come from the
    min/max seen while running ``fp`` over ``calib_images``. All params are
    frozen afterwards. ``config`` overrides the bit widths.
    """
    if fp.mode != FP:
        raise ContractError("quantize_model expects a full-precision model")
    cfg = config or fp.config
    obs = RangeObserver()
    for i in range(0, len(calib_images), batch_size):
        model_forward(calib_images[i:i + batch_size], fp, obs)
    if not obs.lo:
        raise ContractError("calibration set is empty")
    wqp = {}
    for name in quantized_weight_names(cfg):
        t = fp.params[name]
        bits = weight_bits(cfg, name)
        wqp[name] = calibrate(t, bits) if name == "pos" else calibrate_per_channel(t, bits, axis=1)
    aqp = {site: calibrate_from_range(obs.lo[site], obs.hi[site], act_bits(cfg, site)) for site in obs.lo}
    return ViTModel(cfg, dict(fp.params), QUANT, wqp, aqp)


def as_full_precision(model: ViTModel) -> ViTModel:
    return ViTModel(model.config, dict(model.params), FP)


def param_checksum(model: ViTModel) -> str:
    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


__all__ = [
    "FP", "QUANT", "LAYER_NAMES", "ModelConfig", "BlockParams", "ViTModel", "init_model",
    "patch_embed", "msa_forward", "mlp_forward", "block_forward", "embed", "head_forward",
    "forward_from", "model_forward", "block_outputs_trace", "quantize_model", "block_param_names",
    "param_checksum", "as_full_precision", "RangeObserver", "extract_patches",
]
