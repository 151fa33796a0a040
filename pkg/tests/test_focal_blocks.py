import numpy as np
import pytest

from funhsi.blocks import (
    AttentionParams,
    FsmConfig,
    FsmParams,
    LowRankMemory,
    LrsmConfig,
    SsmbParams,
    fsm_forward,
    gated_aggregate,
    hierarchical_contextualize,
    lrsm_aggregate,
    lrsm_forward,
    lrsm_project,
    naive_self_attention,
    receptive_fields,
    ssmb_config,
    ssmb_forward,
)
from funhsi.gradcheck import fd_check, rand64
from funhsi.tensor import ContractError, DiffTensor, count_macs, zero_grads


def t64(data, requires_grad=False):
    return DiffTensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def identity_pyramid_params(cfg, rng):
    """f_z = identity, all-ones depthwise kernels: the impulse-test setup."""
    p = FsmParams(cfg, rng, dtype=np.float64)
    p.f_z_w.data = np.eye(cfg.channels)
    p.f_z_b.data[:] = 0.0
    for k in p.dw:
        k.data[:] = 1.0
    return p


def test_receptive_field_formula():
    assert receptive_fields(FsmConfig(8, 3, (3, 3, 3))) == [3, 5, 7]
    assert receptive_fields(FsmConfig(8, 2, (3, 5))) == [3, 7]


def test_config_validation():
    with pytest.raises(ContractError):
        FsmConfig(8, 2, (3, 4))  # even kernel
    with pytest.raises(ContractError):
        FsmConfig(8, 2, (3,))  # kernel count mismatch
    with pytest.raises(ContractError):
        LrsmConfig(8, rank=9)


def test_impulse_support_matches_receptive_field():
    rng = np.random.default_rng(0)
    cfg = FsmConfig(2, 3, (3, 3, 3))
    p = identity_pyramid_params(cfg, rng)
    x = np.zeros((15, 15, 2))
    x[7, 7, :] = 1.0
    zs = hierarchical_contextualize(t64(x), cfg, p, activation="identity")
    for z, rf in zip(zs[: cfg.levels], receptive_fields(cfg)):
        support = np.any(z.data != 0.0, axis=2)
        rows = np.flatnonzero(support.any(axis=1))
        cols = np.flatnonzero(support.any(axis=0))
        assert rows[-1] - rows[0] + 1 == rf
        assert cols[-1] - cols[0] + 1 == rf
        assert support[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].all()


def test_constant_input_stays_constant():
    rng = np.random.default_rng(1)
    cfg = FsmConfig(3, 2, (3, 5))
    p = identity_pyramid_params(cfg, rng)
    for k, kern in zip(cfg.kernels, p.dw):
        kern.data[:] = 1.0 / (k * k)  # unit-sum kernels
    x = np.full((9, 10, 3), 0.7)
    zs = hierarchical_contextualize(t64(x), cfg, p, activation="identity")
    for z in zs:
        for c in range(3):
            band = z.data[:, :, c]
            assert np.allclose(band, band[0, 0], atol=1e-12)


def test_one_hot_gates_select_level():
    rng = np.random.default_rng(2)
    cfg = FsmConfig(4, 2, (3, 3))
    p = FsmParams(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 6, 6, 4))
    zs = hierarchical_contextualize(x, cfg, p)
    for j in range(cfg.levels + 1):
        p.f_g_w.data[:] = 0.0
        p.f_g_b.data[:] = 0.0
        p.f_g_b.data[j] = 1.0
        z_out = gated_aggregate(x, zs, p)
        assert np.array_equal(z_out.data, zs[j].data), "level %d" % j


def test_zero_gates_zero_output():
    rng = np.random.default_rng(3)
    cfg = FsmConfig(4, 2, (3, 3))
    p = FsmParams(cfg, rng, dtype=np.float64)
    p.f_g_w.data[:] = 0.0
    p.f_g_b.data[:] = 0.0
    x = t64(rand64(rng, 5, 5, 4))
    z_out = gated_aggregate(x, hierarchical_contextualize(x, cfg, p), p)
    assert np.all(z_out.data == 0.0)


def test_gated_aggregate_matches_direct_sum():
    rng = np.random.default_rng(4)
    cfg = FsmConfig(8, 2, (3, 3))
    p = FsmParams(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 4, 4, 8))
    zs = hierarchical_contextualize(x, cfg, p)
    z_out = gated_aggregate(x, zs, p)
    gates = x.data @ p.f_g_w.data + p.f_g_b.data
    want = gates[:, :, 0:1] * zs[0].data
    for idx in range(1, len(zs)):
        want = want + gates[:, :, idx : idx + 1] * zs[idx].data
    assert np.array_equal(z_out.data, want)


def test_fsm_shape_and_zero_input():
    rng = np.random.default_rng(5)
    cfg = FsmConfig(6, 2, (3, 5))
    p = FsmParams(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 7, 9, 6))
    assert fsm_forward(x, cfg, p).shape == (7, 9, 6)
    z = fsm_forward(t64(np.zeros((7, 9, 6))), cfg, p)
    assert np.all(z.data == 0.0)  # biases start at zero


def test_fsm_batched_matches_unbatched():
    rng = np.random.default_rng(6)
    cfg = FsmConfig(4, 2, (3, 3))
    p = FsmParams(cfg, rng, dtype=np.float64)
    xs = rand64(rng, 2, 5, 5, 4)
    batched = fsm_forward(t64(xs), cfg, p).data
    for b in range(2):
        single = fsm_forward(t64(xs[b]), cfg, p).data
        assert np.allclose(batched[b], single, atol=1e-12)


def test_fsm_gradients():
    rng = np.random.default_rng(7)
    cfg = FsmConfig(4, 2, (3, 3))
    p = FsmParams(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 6, 6, 4), requires_grad=True)
    leaves = [x] + [t for _, t in p.items()]
    for t in leaves:
        t.requires_grad = True
    assert fd_check(lambda: fsm_forward(x, cfg, p).mean(), leaves, points=3) < 1e-4


# -------------------------------------------------------------------- lrsm


def test_lrsm_weights_sum_to_one():
    rng = np.random.default_rng(8)
    cfg = LrsmConfig(8, rank=4, bank=6)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    z_k = t64(rand64(rng, 3, 4))
    _, w = lrsm_aggregate(z_k, mem, return_weights=True)
    assert np.all(np.abs(w.data.sum(axis=-1) - 1.0) < 1e-6)


def test_lrsm_degenerate_bank_returns_common_column():
    rng = np.random.default_rng(9)
    cfg = LrsmConfig(8, rank=4, bank=6)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    v = rand64(rng, 4)
    mem.bank.data[:] = v[:, None]
    for trial in range(3):
        z_l = lrsm_aggregate(t64(rand64(rng, 4)), mem)
        assert np.allclose(z_l.data, v, atol=1e-12)


def test_lrsm_bank_permutation_invariance():
    rng = np.random.default_rng(10)
    cfg = LrsmConfig(8, rank=4, bank=6)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    z_k = t64(rand64(rng, 4))
    ref = lrsm_aggregate(z_k, mem).data.copy()
    for trial in range(5):
        perm = rng.permutation(cfg.bank)
        mem_p = LowRankMemory(cfg, np.random.default_rng(0), dtype=np.float64)
        mem_p.bank.data = mem.bank.data[:, perm]
        got = lrsm_aggregate(z_k, mem_p).data
        assert np.max(np.abs(got - ref)) < 1e-12


def test_lrsm_matches_matrix_oracle():
    rng = np.random.default_rng(11)
    cfg = LrsmConfig(8, rank=4, bank=6)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    z_k = rand64(rng, 4)
    got = lrsm_aggregate(t64(z_k), mem).data
    scores = z_k.reshape(1, 4) @ mem.bank.data
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    want = (w @ mem.bank.data.T).reshape(4)
    assert np.array_equal(got, want)


def test_lrsm_modulator_range_and_structure():
    rng = np.random.default_rng(12)
    cfg = LrsmConfig(5, rank=4, bank=8)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    mem.q_w.data = np.eye(5)  # make the query the identity to expose the gate
    mem.q_b.data[:] = 0.0
    x = rand64(rng, 6, 6, 5) + 2.0  # strictly positive
    out = lrsm_forward(t64(x), mem).data
    ratio = out / x
    for c in range(5):
        vals = ratio[:, :, c]
        assert np.allclose(vals, vals[0, 0], atol=1e-12)  # one gate per channel
        assert 0.0 < vals[0, 0] < 1.0


def test_lrsm_project_shape():
    rng = np.random.default_rng(13)
    cfg = LrsmConfig(8, rank=4, bank=6)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    assert lrsm_project(t64(rand64(rng, 5, 5, 8)), mem).shape == (4,)
    assert lrsm_project(t64(rand64(rng, 2, 5, 5, 8)), mem).shape == (2, 4)


def test_lrsm_gradients():
    rng = np.random.default_rng(14)
    cfg = LrsmConfig(4, rank=4, bank=5)
    mem = LowRankMemory(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 4, 4, 4), requires_grad=True)
    leaves = [x] + [t for _, t in mem.items()]
    for t in leaves:
        t.requires_grad = True
    assert fd_check(lambda: lrsm_forward(x, mem).mean(), leaves, points=4) < 1e-4


# -------------------------------------------------------------------- ssmb


def test_ssmb_shape_and_residual_identity():
    rng = np.random.default_rng(15)
    cfg = ssmb_config(channels=6, rank=4, bank=8)
    p = SsmbParams(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 6, 8, 6))
    assert ssmb_forward(x, cfg, p).shape == (6, 8, 6)
    for _, t in p.items():
        t.data[:] = 0.0
    out = ssmb_forward(x, cfg, p)
    assert np.array_equal(out.data, x.data)


def test_ssmb_gradients():
    rng = np.random.default_rng(16)
    cfg = ssmb_config(channels=4, kernels=(3, 3), rank=4, bank=4, ffn_expand=2)
    p = SsmbParams(cfg, rng, dtype=np.float64)
    x = t64(rand64(rng, 4, 4, 4), requires_grad=True)
    leaves = [x] + [t for _, t in p.items()]
    for t in leaves:
        t.requires_grad = True
    assert fd_check(lambda: ssmb_forward(x, cfg, p).mean(), leaves, points=2) < 1e-4


# --------------------------------------------------------------- attention


def test_attention_single_token_is_value():
    rng = np.random.default_rng(17)
    p = AttentionParams(5, rng, dtype=np.float64)
    x = rand64(rng, 1, 1, 5)
    out = naive_self_attention(t64(x), p).data
    want = x @ p.v_w.data + p.v_b.data
    assert np.allclose(out, want, atol=1e-12)


def test_attention_uniform_tokens():
    rng = np.random.default_rng(18)
    p = AttentionParams(4, rng, dtype=np.float64)
    token = rand64(rng, 4)
    x = np.broadcast_to(token, (3, 3, 4)).copy()
    out = naive_self_attention(t64(x), p).data
    want = token @ p.v_w.data + p.v_b.data
    assert np.allclose(out, np.broadcast_to(want, out.shape), atol=1e-12)


def test_mac_scaling_linear_vs_quadratic():
    rng = np.random.default_rng(19)
    c = 16
    cfg = FsmConfig(c, 2, (3, 5))
    fsm_p = FsmParams(cfg, rng)
    attn_p = AttentionParams(c, rng)

    def fsm_macs(side):
        x = DiffTensor(rng.standard_normal((side, side, c)).astype(np.float32))
        with count_macs() as m:
            fsm_forward(x, cfg, fsm_p)
        return m.total

    def attn_macs(side):
        x = DiffTensor(rng.standard_normal((side, side, c)).astype(np.float32))
        with count_macs() as m:
            naive_self_attention(x, attn_p)
        return m.total

    fsm_ratio = fsm_macs(64) / fsm_macs(32)
    attn_ratio = attn_macs(64) / attn_macs(32)
    assert fsm_ratio == 4.0
    assert abs(attn_ratio - 16.0) <= 1.6
