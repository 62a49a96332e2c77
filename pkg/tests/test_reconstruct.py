import csv
import math
from statistics import NormalDist

import numpy as np
import pytest

import vitptq.model as model_mod
from vitptq.errors import ContractError, DimensionError
from vitptq.model import (
    FP,
    QUANT,
    ModelConfig,
    block_forward,
    block_param_names,
    embed,
    init_model,
    param_checksum,
    quantize_model,
)
from vitptq.optim import AdamState, adam_step
from vitptq.reconstruct import (
    LOG_FIELDS,
    LossLog,
    ReconstructionConfig,
    auto_balance,
    ebgs_loss,
    fuse_losses,
    ibls_loss,
    obwr_loss,
    reconstruct_block,
    run_mgrq,
)
from vitptq.tensor import Tensor

from conftest import TINY, grid_models, straight_through_gradcheck

SMALL = ModelConfig(image_size=8, patch_size=4, channels=2, embed_dim=8, heads=2, depth=2, mlp_dim=12, num_classes=3)


def calib_images(cfg, n=8, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, cfg.channels, cfg.image_size, cfg.image_size))


# -- plain-Python oracle for a one-token, one-head model ----------------------


def _vm(v, W):
    return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(W[0]))]


def _ln(v, g, b, eps):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + eps) * gi + bi for a, gi, bi in zip(v, g, b)]


def oracle_block(x, P, l=0, eps=1e-5):
    p = lambda n: P[f"blocks.{l}.{n}"].data.tolist()  # noqa: E731
    # a single token attends only to itself, so attention reduces to v W_o
    y = _ln(x, p("ln1.g"), p("ln1.b"), eps)
    attn = _vm(_vm(y, p("attn.v.w")), p("attn.o.w"))
    h = [a + b for a, b in zip(x, attn)]
    u = _ln(h, p("ln2.g"), p("ln2.b"), eps)
    pre = [a + b for a, b in zip(_vm(u, p("mlp.fc1.w")), p("mlp.fc1.b"))]
    act = [a * NormalDist().cdf(a) for a in pre]
    mlp = [a + b for a, b in zip(_vm(act, p("mlp.fc2.w")), p("mlp.fc2.b"))]
    return [a + b for a, b in zip(h, mlp)]


def oracle_logits(img, P):
    flat = img.reshape(-1).tolist()
    tok = [a + b + c for a, b, c in zip(_vm(flat, P["patch.w"].data.tolist()), P["patch.b"].data.tolist(),
                                          P["pos"].data[0].tolist())]
    out = oracle_block(tok, P)
    return [a + b for a, b in zip(_vm(out, P["head.w"].data.tolist()), P["head.b"].data.tolist())]


class TestLossIdentities:
    def test_grid_models_agree(self):
        fp, q, x = grid_models()
        assert model_mod.model_forward(x, fp).data.tobytes() == model_mod.model_forward(x, q).data.tobytes()

    def test_all_losses_zero_on_grid_models(self):
        fp, q, x = grid_models()
        m0 = embed(x, fp)
        assert obwr_loss(fp, q, 0, m0).item() == 0.0
        assert ebgs_loss(fp, q, x).item() == 0.0
        _, a = block_forward(m0, fp.block(0), FP)
        _, b = block_forward(m0, q.block(0), QUANT)
        assert ibls_loss(a, b).item() == 0.0

    def test_self_losses_zero(self):
        m = init_model(SMALL, 0)
        x = calib_images(SMALL, 3)
        assert ebgs_loss(m, m, x).item() == 0.0
        assert obwr_loss(m, m, 1, Tensor(np.ones((3, 4, 8)))).item() == 0.0
        _, outs = block_forward(embed(x, m), m.block(0))
        assert ibls_loss(outs, outs).item() == 0.0


class TestOBWR:
    def test_hand_instance(self):
        fp = init_model(TINY, 0)
        q = init_model(TINY, 1)
        x = [0.3, -1.2]
        a, b = oracle_block(x, fp.params), oracle_block(x, q.params)
        expect = sum((u - v) ** 2 for u, v in zip(a, b)) / 2
        assert obwr_loss(fp, q, 0, Tensor([[x]])).item() == pytest.approx(expect, rel=1e-12)

    def test_other_blocks_irrelevant(self):
        fp = init_model(SMALL, 0)
        q = quantize_model(fp, calib_images(SMALL))
        m0 = embed(calib_images(SMALL, 3), fp)
        before = obwr_loss(fp, q, 0, m0).item()
        q2 = q.copy()
        for n in block_param_names(1):
            q2.params[n] = Tensor(q2.params[n].data + 0.3)
        q2.params["head.w"] = Tensor(q2.params["head.w"].data * 2)
        assert obwr_loss(fp, q2, 0, m0).item() == before

    def test_block_index_checked(self):
        m = init_model(SMALL, 0)
        with pytest.raises(ContractError):
            obwr_loss(m, m, 2, Tensor(np.ones((1, 4, 8))))

    def test_does_not_mutate(self):
        fp = init_model(SMALL, 0)
        q = quantize_model(fp, calib_images(SMALL))
        c1, c2 = param_checksum(fp), param_checksum(q)
        obwr_loss(fp, q, 1, embed(calib_images(SMALL, 2), fp))
        assert (param_checksum(fp), param_checksum(q)) == (c1, c2)


class TestEBGS:
    def test_hand_instance(self):
        fp, q = init_model(TINY, 0), init_model(TINY, 3)
        x = calib_images(TINY, 2, seed=4)
        diffs = [(u - v) ** 2 for img in x for u, v in zip(oracle_logits(img, fp.params), oracle_logits(img, q.params))]
        assert ebgs_loss(fp, q, x).item() == pytest.approx(sum(diffs) / len(diffs), rel=1e-12)

    def test_head_only_perturbation(self):
        fp = init_model(SMALL, 0)
        x = calib_images(SMALL)
        q = quantize_model(fp, x)
        q2 = q.copy()
        q2.params["head.b"] = Tensor(q.params["head.b"].data + 0.5)
        assert ebgs_loss(fp, q2, x).item() != ebgs_loss(fp, q, x).item()
        m = [embed(x, fp)] + model_mod.block_outputs_trace(x, fp)
        for l in range(SMALL.depth):
            assert obwr_loss(fp, q2, l, m[l]).item() == obwr_loss(fp, q, l, m[l]).item()


class TestIBLS:
    def test_mean_of_layer_mses(self):
        a = [Tensor([0.0, 0.0]), Tensor([0.0])]
        b = [Tensor([2.0, 0.0]), Tensor([2.0])]  # per-layer MSEs 2.0 and 4.0
        assert ibls_loss(a, b).item() == 3.0

    def test_single_layer_is_mse(self):
        a, b = Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 2.0, 5.0])
        assert ibls_loss([a], [b]).item() == pytest.approx(5 / 3, abs=1e-15)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ibls_loss([Tensor([1.0])], [Tensor([1.0]), Tensor([2.0])])
        with pytest.raises(DimensionError):
            ibls_loss([Tensor([1.0])], [Tensor([1.0, 2.0])])
        with pytest.raises(DimensionError):
            ibls_loss([], [])


class TestFuse:
    def test_arithmetic(self):
        assert fuse_losses(1.0, 2.0, 3.0, 0.5, 0.1).fused == pytest.approx(2.3, abs=1e-15)

    @pytest.mark.parametrize("o", [0.0, 1e-9, 0.123456789, 7.5])
    def test_zero_weights_give_obwr_exactly(self, o):
        assert fuse_losses(o, 3.7, 9.1, 0.0, 0.0).fused == o

    def test_linearity_without_obwr(self):
        assert fuse_losses(0.0, 2.0, 5.0, 0.25, 4.0).fused == 0.25 * 2.0 + 4.0 * 5.0

    def test_affine_in_each_component(self):
        f = lambda e: fuse_losses(1.5, e, 2.0, 0.5, 0.25).fused  # noqa: E731
        assert f(4.0) - f(2.0) == pytest.approx(2 * (f(2.0) - f(1.0)), abs=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(ContractError):
            fuse_losses(-1.0, 0.0, 0.0, 1.0, 1.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            fuse_losses(float("nan"), 0.0, 0.0, 1.0, 1.0)


class TestAutoBalance:
    def test_equal_losses(self):
        assert auto_balance(0.7, 0.7, 0.7) == (1.0, 1.0)

    def test_arithmetic(self):
        assert auto_balance(2.0, 4.0, 0.5) == (0.5, 4.0)

    def test_zero_ebgs_clamps(self):
        assert auto_balance(1.0, 0.0, 1.0) == (1e4, 1.0)

    def test_zero_obwr_clamps_low(self):
        assert auto_balance(0.0, 1.0, 1.0) == (1e-4, 1e-4)


class TestAdam:
    def test_zero_grad_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        st = AdamState()
        for _ in range(5):
            p = adam_step(p, {"w": np.zeros(2)}, st, 1e-2)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -2.0, 1e-3])
        out = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), 1e-3)["w"]
        np.testing.assert_allclose(out, -1e-3 * np.sign(g), rtol=1e-4)

    def test_second_step_closed_form(self):
        g1, g2 = np.array([1.0]), np.array([-0.5])
        st = AdamState()
        p = adam_step({"w": np.zeros(1)}, {"w": g1}, st, 0.1)
        p = adam_step(p, {"w": g2}, st, 0.1)
        m = (0.9 * 0.1 * 1.0 + 0.1 * -0.5) / (1 - 0.9**2)
        v = (0.999 * 0.001 * 1.0 + 0.001 * 0.25) / (1 - 0.999**2)
        assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8) - 0.1 * m / (math.sqrt(v) + 1e-8), rel=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=4) for _ in range(6)]

        def run():
            p, st = {"w": np.ones(4)}, AdamState()
            for g in grads:
                p = adam_step(p, {"w": g}, st, 1e-2)
            return p["w"].tobytes()

        assert run() == run()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 1e-3)


def small_setup():
    fp = init_model(SMALL, 0)
    x = calib_images(SMALL, 12)
    return fp, x, quantize_model(fp, x)


FAST = ReconstructionConfig(iterations=4, lr=1e-3, batch_size=4, calib_size=12)


class TestReconstructBlock:
    def test_zero_iterations_is_noop(self):
        fp, x, q = small_setup()
        out = reconstruct_block(0, fp, q, x, ReconstructionConfig(iterations=0))
        assert param_checksum(out) == param_checksum(q)

    @pytest.mark.parametrize("l", [0, 1])
    def test_update_scope(self, l):
        fp, x, q = small_setup()
        out = reconstruct_block(l, fp, q, x, FAST)
        inside = set(block_param_names(l))
        changed = {n for n in q.params if q.params[n].data.tobytes() != out.params[n].data.tobytes()}
        assert changed and changed <= inside
        assert out.weight_qp == q.weight_qp and out.act_qp == q.act_qp

    def test_input_not_mutated(self):
        fp, x, q = small_setup()
        c = param_checksum(q)
        reconstruct_block(0, fp, q, x, FAST)
        assert param_checksum(q) == c

    def test_requires_quantized_model(self):
        fp, x, _ = small_setup()
        with pytest.raises(ContractError):
            reconstruct_block(0, fp, fp, x, FAST)

    def test_batch_larger_than_calibration(self):
        fp, x, q = small_setup()
        with pytest.raises(ContractError):
            reconstruct_block(0, fp, q, x[:3], FAST)

    def test_log_rows(self):
        fp, x, q = small_setup()
        log = LossLog()
        reconstruct_block(1, fp, q, x, FAST, log=log)
        assert [(b, it) for b, it, _ in log.rows] == [(1, i) for i in range(4)]
        for _, _, lb in log.rows:
            assert lb.fused == lb.obwr + lb.alpha * lb.ebgs + lb.beta * lb.ibls
            assert min(lb.obwr, lb.ebgs, lb.ibls) >= 0
        assert len({(lb.alpha, lb.beta) for _, _, lb in log.rows}) == 1  # frozen for the block


class TestRunMGRQ:
    def test_deterministic(self):
        fp, x, _ = small_setup()
        assert param_checksum(run_mgrq(fp, x, FAST)) == param_checksum(run_mgrq(fp, x, FAST))

    def test_seed_matters(self):
        fp, x, _ = small_setup()
        other = ReconstructionConfig(**{**FAST.__dict__, "seed": 1})
        assert param_checksum(run_mgrq(fp, x, FAST)) != param_checksum(run_mgrq(fp, x, other))

    def test_no_iterations_is_calibration_baseline(self):
        fp, x, q = small_setup()
        out = run_mgrq(fp, x, ReconstructionConfig(iterations=0))
        assert param_checksum(out) == param_checksum(q)
        assert out.weight_qp == q.weight_qp and out.act_qp == q.act_qp

    def test_zero_weights_reproduce_obwr_arm(self):
        fp, x, _ = small_setup()
        fixed = ReconstructionConfig(**{**FAST.__dict__, "auto_balance": False, "alpha": 0.0, "beta": 0.0})
        obwr_only = ReconstructionConfig(**{**FAST.__dict__, "use_ebgs": False, "use_ibls": False})
        assert param_checksum(run_mgrq(fp, x, fixed)) == param_checksum(run_mgrq(fp, x, obwr_only))

    def test_bits_override(self):
        fp, x, _ = small_setup()
        q = run_mgrq(fp, x, ReconstructionConfig(iterations=0), bits=(3, 5))
        assert q.config.block_w_bits == 3 and q.act_qp["blocks.0.probs"].bits == 5
        assert q.weight_qp["head.w"].bits == 8

    def test_loss_log_csv(self, tmp_path):
        fp, x, _ = small_setup()
        log = LossLog()
        run_mgrq(fp, x, FAST, log=log)
        path = tmp_path / "loss.csv"
        log.write_csv(path)
        with open(path) as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOG_FIELDS
        assert len(rows) == 1 + SMALL.depth * FAST.iterations
        assert [int(r[0]) for r in rows[1:]] == [l for l in range(SMALL.depth) for _ in range(FAST.iterations)]
        b, it, lb = log.rows[5]
        assert float(rows[6][7]) == lb.fused


@pytest.mark.parametrize("l,name", [(0, "attn.q.w"), (1, "mlp.fc1.w"), (1, "ln2.g")])
def test_fused_gradient_matches_finite_differences(monkeypatch, l, name):
    fp, x, q = small_setup()
    assert straight_through_gradcheck(monkeypatch, fp, q, x, l, name) <= 1e-3
