import numpy as np
import pytest

import vitptq.model as model_mod
from vitptq.data import sample_calibration, toy_datasets
from vitptq.fixture import load_fixture
from vitptq.model import BLOCK_ACT_SITES, FP, QUANT, ModelConfig, ViTModel
from vitptq.quant import QuantParams, fake_quant
from vitptq.reconstruct import FPCache, block_objective, quant_block_inputs
from vitptq.tensor import Tape, Tensor, add, backward, mul, scale, sum_all

# One patch, one token, D=2: small enough for a plain-Python oracle.
TINY = ModelConfig(image_size=2, patch_size=2, channels=1, embed_dim=2, heads=1, depth=1, mlp_dim=3, num_classes=2)


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(op, inputs, seed=0, h=1e-4):
    """Max relative error between tape and finite-difference gradients.

    The op output is reduced to a scalar with a fixed random projection so
    every output element contributes.
    """
    rng = np.random.default_rng(seed)
    out0 = op(*[Tensor(x) for x in inputs])
    proj = rng.normal(size=out0.shape)

    def scalar(*xs):
        return float(np.sum(op(*[Tensor(x) for x in xs]).data * proj))

    with Tape() as tape:
        ts = [tape.watch(Tensor(x)) for x in inputs]
        loss = sum_all(mul(op(*ts), Tensor(proj)))
    grads = backward(tape, loss, ts)
    worst = 0.0
    for k, x in enumerate(inputs):
        def fk(v, k=k):
            xs = list(inputs)
            xs[k] = v
            return scalar(*xs)

        worst = max(worst, rel_err(grads[ts[k]], numeric_grad(fk, x, h)))
    return worst


@pytest.fixture(scope="session")
def toy():
    return toy_datasets(0)


@pytest.fixture(scope="session")
def fp_model():
    return load_fixture()


@pytest.fixture(scope="session")
def calib(toy):
    return sample_calibration(toy[0], 256, 0)


def grid_models():
    """fp and quantized models that agree bit for bit.

    Every weight, bias and activation is an integer on a unit 8-bit grid;
    LayerNorm gammas are zero so normalized tokens equal the betas and fc1's
    bias makes GELU see exactly zero.
    """
    P = {
        "patch.w": [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [2.0, 0.0]], "patch.b": [1.0, 0.0], "pos": [[0.0, 1.0]],
        "blocks.0.ln1.g": [0.0, 0.0], "blocks.0.ln1.b": [1.0, -2.0],
        "blocks.0.attn.q.w": [[1.0, 0.0], [2.0, -1.0]], "blocks.0.attn.k.w": [[0.0, 1.0], [1.0, 1.0]],
        "blocks.0.attn.v.w": [[1.0, -1.0], [0.0, 2.0]], "blocks.0.attn.o.w": [[1.0, 1.0], [-1.0, 0.0]],
        "blocks.0.ln2.g": [0.0, 0.0], "blocks.0.ln2.b": [2.0, 1.0],
        "blocks.0.mlp.fc1.w": [[1.0, 0.0, -1.0], [2.0, 1.0, 0.0]], "blocks.0.mlp.fc1.b": [-4.0, -1.0, 2.0],
        "blocks.0.mlp.fc2.w": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], "blocks.0.mlp.fc2.b": [1.0, -1.0],
        "head.w": [[1.0, -1.0], [0.0, 2.0]], "head.b": [0.0, 1.0],
    }
    params = {k: Tensor(np.array(v)) for k, v in P.items()}
    unit = QuantParams(np.float64(1.0), np.int64(128), 8)
    wqp = {}
    for name in ("patch.w", "blocks.0.attn.q.w", "blocks.0.attn.k.w", "blocks.0.attn.v.w", "blocks.0.attn.o.w",
                 "blocks.0.mlp.fc1.w", "blocks.0.mlp.fc2.w", "head.w"):
        n = params[name].shape[1]
        wqp[name] = QuantParams(np.ones(n), np.full(n, 128), 8, axis=1)
    wqp["pos"] = unit
    aqp = {"patch.in": unit, "head.in": unit, **{f"blocks.0.{s}": unit for s in BLOCK_ACT_SITES}}
    fp = ViTModel(TINY, params, FP)
    q = ViTModel(TINY, dict(params), QUANT, wqp, aqp)
    images = np.random.default_rng(0).integers(-1, 2, size=(5, 1, 2, 2)).astype(float)
    return fp, q, images


class StraightThrough:
    """Stand-in for ``fake_quant`` whose rounding residuals are frozen.

    The first (recording) pass runs the real quantizer and stores, per call,
    the residual ``fq(x) - x`` and the in-range mask. Replays return
    ``x + residual`` inside the range and the saturated value outside: the
    function whose exact derivative the straight-through estimator reports,
    valid for perturbations that stay inside the recorded bins.
    """

    def __init__(self):
        self.records = []
        self.replay = False
        self.i = 0

    def __call__(self, x, qp):
        if not self.replay:
            out = fake_quant(x, qp)
            s, z = qp.broadcast(x.data.ndim)
            mask = (x.data >= s * -z) & (x.data <= s * (qp.qmax - z))
            self.records.append((out.data - x.data, mask, out.data))
            return out
        r, mask, sat = self.records[self.i]
        self.i += 1
        return Tensor(np.where(mask, x.data + r, sat))


def straight_through_gradcheck(monkeypatch, fp, q, images, l, name, alpha=0.7, beta=1.3, batch=4, samples=12,
                               h=1e-6):
    """Relative error between the tape gradient of the fused block-``l`` loss
    and central differences of its straight-through surrogate, over a few
    sampled entries of ``blocks.{l}.{name}``."""
    cache = FPCache(fp, images)
    q_in = quant_block_inputs(q, images, l)
    idx = np.arange(batch)
    full = f"blocks.{l}.{name}"
    st = StraightThrough()
    monkeypatch.setattr(model_mod, "fake_quant", st)

    def fused(model):
        o, e, i = block_objective(model, l, cache, idx, q_in)
        return add(add(o, scale(e, alpha)), scale(i, beta))

    with Tape() as tape:
        w = tape.watch(q.params[full])
        total = fused(q)
    grad = backward(tape, total, [w])[w].reshape(-1)

    st.replay = True
    base = q.params[full].data
    picks = np.random.default_rng(0).choice(base.size, size=min(samples, base.size), replace=False)
    num = []
    for k in picks:
        vals = []
        for sign in (1, -1):
            d = base.copy().reshape(-1)
            d[k] += sign * h
            qq = q.copy()
            qq.params[full] = Tensor(d.reshape(base.shape))
            st.i = 0
            vals.append(fused(qq).item())
        num.append((vals[0] - vals[1]) / (2 * h))
    return rel_err(grad[picks], np.array(num))
