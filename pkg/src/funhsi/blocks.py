"""Focal modulation blocks.

Two modulation paths share the query-times-context pattern: the spatial one
(fsm_forward) aggregates hierarchical depthwise-conv contexts with learned
gates, the spectral one (lrsm_forward) retrieves a low-rank vector from a
learnable memory bank via softmax matching and gates channels with it.
ssmb_forward chains both plus an FFN, pre-norm residual style. A naive
self-attention is kept only as the quadratic-cost reference for the
complexity benchmark.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    DiffTensor,
    ShapeError,
    add,
    depthwise_conv2d,
    div,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    matmul,
    mul,
    narrow,
    reshape,
    sigmoid,
    softmax,
    transpose,
)


@dataclass(frozen=True)
class FsmConfig:
    channels: int
    levels: int = 2
    kernels: tuple = (3, 5)

    def __post_init__(self):
        if self.levels < 1:
            raise ContractError("fsm: levels must be >= 1")
        if len(self.kernels) != self.levels:
            raise ContractError(
                "fsm: %d kernel sizes for %d levels" % (len(self.kernels), self.levels)
            )
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ContractError("fsm: kernel sizes must be odd and >= 1, got %r" % (self.kernels,))


@dataclass(frozen=True)
class LrsmConfig:
    channels: int
    rank: int
    bank: int = 32

    def __post_init__(self):
        if not 1 <= self.rank <= self.channels:
            raise ContractError("lrsm: rank must be in [1, channels]")
        if self.bank < 1:
            raise ContractError("lrsm: bank size must be >= 1")


def default_rank(channels):
    return max(4, channels // 4)


@dataclass(frozen=True)
class SsmbConfig:
    fsm: FsmConfig
    lrsm: LrsmConfig
    ffn_expand: int = 4

    def __post_init__(self):
        if self.fsm.channels != self.lrsm.channels:
            raise ContractError("ssmb: fsm and lrsm channel counts differ")
        if self.ffn_expand < 1:
            raise ContractError("ssmb: ffn expansion must be >= 1")

    @property
    def channels(self):
        return self.fsm.channels


def ssmb_config(channels, levels=2, kernels=(3, 5), rank=None, bank=32, ffn_expand=4):
    if rank is None:
        rank = default_rank(channels)
    return SsmbConfig(
        fsm=FsmConfig(channels, levels, tuple(kernels)),
        lrsm=LrsmConfig(channels, rank, bank),
        ffn_expand=ffn_expand,
    )


def receptive_fields(cfg):
    """Per-level effective receptive field: r = 1 + sum of (k - 1) so far."""
    rf, out = 1, []
    for k in cfg.kernels:
        rf += k - 1
        out.append(rf)
    return out


# ------------------------------------------------------------ initialization


def _linear_init(rng, cin, cout, dtype):
    std = math.sqrt(2.0 / (cin + cout))
    w = DiffTensor(rng.normal(0.0, std, (cin, cout)).astype(dtype), requires_grad=True)
    b = DiffTensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return w, b


def _conv_init(rng, kh, kw, cin, cout, dtype):
    std = math.sqrt(2.0 / (kh * kw * (cin + cout)))
    k = DiffTensor(rng.normal(0.0, std, (kh, kw, cin, cout)).astype(dtype), requires_grad=True)
    b = DiffTensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return k, b


def _dw_init(rng, k, c, dtype):
    return DiffTensor(rng.normal(0.0, 1.0 / k, (k, k, c)).astype(dtype), requires_grad=True)


def _ln_init(c, dtype):
    g = DiffTensor(np.ones(c, dtype=dtype), requires_grad=True)
    b = DiffTensor(np.zeros(c, dtype=dtype), requires_grad=True)
    return g, b


class FsmParams:
    def __init__(self, cfg, rng, dtype=np.float32):
        c = cfg.channels
        self.f_z_w, self.f_z_b = _linear_init(rng, c, c, dtype)
        self.dw = [_dw_init(rng, k, c, dtype) for k in cfg.kernels]
        self.f_g_w, self.f_g_b = _linear_init(rng, c, cfg.levels + 1, dtype)
        self.q_w, self.q_b = _linear_init(rng, c, c, dtype)
        self.h_w, self.h_b = _linear_init(rng, c, c, dtype)
        self.out_w, self.out_b = _linear_init(rng, c, c, dtype)

    def items(self):
        yield "f_z.w", self.f_z_w
        yield "f_z.b", self.f_z_b
        for i, k in enumerate(self.dw):
            yield "dw%d" % i, k
        yield "f_g.w", self.f_g_w
        yield "f_g.b", self.f_g_b
        yield "q.w", self.q_w
        yield "q.b", self.q_b
        yield "h.w", self.h_w
        yield "h.b", self.h_b
        yield "out.w", self.out_w
        yield "out.b", self.out_b


class LowRankMemory:
    def __init__(self, cfg, rng, dtype=np.float32):
        c = cfg.channels
        self.bank = DiffTensor(
            rng.normal(0.0, 1.0, (cfg.rank, cfg.bank)).astype(dtype), requires_grad=True
        )
        self.down_w, self.down_b = _linear_init(rng, c, cfg.rank, dtype)
        self.up_w, self.up_b = _linear_init(rng, cfg.rank, c, dtype)
        self.q_w, self.q_b = _linear_init(rng, c, c, dtype)

    def items(self):
        yield "bank", self.bank
        yield "down.w", self.down_w
        yield "down.b", self.down_b
        yield "up.w", self.up_w
        yield "up.b", self.up_b
        yield "q.w", self.q_w
        yield "q.b", self.q_b


class SsmbParams:
    def __init__(self, cfg, rng, dtype=np.float32):
        c = cfg.channels
        self.ln1_g, self.ln1_b = _ln_init(c, dtype)
        self.fsm = FsmParams(cfg.fsm, rng, dtype)
        self.ln2_g, self.ln2_b = _ln_init(c, dtype)
        self.lrsm = LowRankMemory(cfg.lrsm, rng, dtype)
        self.ln3_g, self.ln3_b = _ln_init(c, dtype)
        hidden = c * cfg.ffn_expand
        self.ffn1_w, self.ffn1_b = _linear_init(rng, c, hidden, dtype)
        self.ffn2_w, self.ffn2_b = _linear_init(rng, hidden, c, dtype)

    def items(self):
        yield "ln1.g", self.ln1_g
        yield "ln1.b", self.ln1_b
        for name, t in self.fsm.items():
            yield "fsm." + name, t
        yield "ln2.g", self.ln2_g
        yield "ln2.b", self.ln2_b
        for name, t in self.lrsm.items():
            yield "lrsm." + name, t
        yield "ln3.g", self.ln3_g
        yield "ln3.b", self.ln3_b
        yield "ffn1.w", self.ffn1_w
        yield "ffn1.b", self.ffn1_b
        yield "ffn2.w", self.ffn2_w
        yield "ffn2.b", self.ffn2_b


class AttentionParams:
    def __init__(self, channels, rng, dtype=np.float32):
        self.q_w, self.q_b = _linear_init(rng, channels, channels, dtype)
        self.k_w, self.k_b = _linear_init(rng, channels, channels, dtype)
        self.v_w, self.v_b = _linear_init(rng, channels, channels, dtype)

    def items(self):
        yield "q.w", self.q_w
        yield "q.b", self.q_b
        yield "k.w", self.k_w
        yield "k.b", self.k_b
        yield "v.w", self.v_w
        yield "v.b", self.v_b


# ------------------------------------------------------------------ spatial


def _spatial_extents(x):
    if x.ndim == 3:
        return None, x.shape[0], x.shape[1], x.shape[2]
    if x.ndim == 4:
        return x.shape[0], x.shape[1], x.shape[2], x.shape[3]
    raise ShapeError("expected [H,W,C] or [B,H,W,C], got %r" % (tuple(x.shape),))


def hierarchical_contextualize(x, cfg, p, activation="gelu"):
    """Context pyramid Z^1..Z^{L+1}.

    Z^0 = f_z(x); each level applies a depthwise conv then the activation;
    the final entry is the global average of Z^L broadcast over space.
    The activation hook exists so exactness tests can run the linear path.
    """
    act = gelu if activation == "gelu" else (lambda t: t)
    bsz, h, w, c = _spatial_extents(x)
    z = linear(x, p.f_z_w, p.f_z_b)
    zs = []
    for kern in p.dw:
        z = act(depthwise_conv2d(z, kern))
        zs.append(z)
    pooled = global_avg_pool(zs[-1])
    shape = (bsz, 1, 1, c) if bsz is not None else (1, 1, c)
    # materialize the broadcast so every entry is a full H x W map
    ones_map = DiffTensor(np.ones((h, w, 1), dtype=x.dtype))
    zs.append(mul(reshape(pooled, shape), ones_map))
    return zs


def gated_aggregate(x, zs, p):
    """Weighted sum of context levels, gate weights from f_g(x)."""
    gates = linear(x, p.f_g_w, p.f_g_b)  # [..,H,W,L+1]
    z_out = None
    for idx, z in enumerate(zs):
        term = mul(narrow(gates, -1, idx, 1), z)
        z_out = term if z_out is None else add(z_out, term)
    return z_out


def fsm_forward(x, cfg, p, activation="gelu"):
    """Spatial modulation: query projection times the aggregated context."""
    zs = hierarchical_contextualize(x, cfg, p, activation=activation)
    z_out = gated_aggregate(x, zs, p)
    modulator = linear(z_out, p.h_w, p.h_b)
    y = mul(linear(x, p.q_w, p.q_b), modulator)
    return linear(y, p.out_w, p.out_b)


# ------------------------------------------------------------------ spectral


def lrsm_project(x, mem):
    """Pool space away and project the spectrum to rank K."""
    return linear(global_avg_pool(x), mem.down_w, mem.down_b)


def lrsm_aggregate(z_k, mem, return_weights=False):
    """Softmax retrieval against the bank columns: I = softmax(z_k @ bank)."""
    flat = z_k.ndim == 1
    if flat:
        z_k = reshape(z_k, (1, z_k.shape[0]))
    scores = matmul(z_k, mem.bank)  # [.., B]
    weights = softmax(scores, axis=-1)
    z_l = matmul(weights, transpose(mem.bank, (1, 0)))  # [.., K]
    if flat:
        z_l = reshape(z_l, (z_l.shape[-1],))
    if return_weights:
        return z_l, weights
    return z_l


def lrsm_forward(x, mem):
    """Spectral modulation: sigmoid gate per channel from the retrieved vector."""
    bsz, h, w, c = _spatial_extents(x)
    z_l = lrsm_aggregate(lrsm_project(x, mem), mem)
    s = sigmoid(linear(z_l, mem.up_w, mem.up_b))  # [.., C]
    shape = (bsz, 1, 1, c) if bsz is not None else (c,)
    return mul(linear(x, mem.q_w, mem.q_b), reshape(s, shape))


# ------------------------------------------------------------------ composed


def ssmb_forward(x, cfg, p):
    """FSM, LRSM and FFN in sequence, each pre-normed with a residual."""
    x1 = add(x, fsm_forward(layer_norm(x, p.ln1_g, p.ln1_b), cfg.fsm, p.fsm))
    x2 = add(x1, lrsm_forward(layer_norm(x1, p.ln2_g, p.ln2_b), p.lrsm))
    z = layer_norm(x2, p.ln3_g, p.ln3_b)
    ffn = linear(gelu(linear(z, p.ffn1_w, p.ffn1_b)), p.ffn2_w, p.ffn2_b)
    return add(x2, ffn)


def naive_self_attention(x, p):
    """Scaled dot-product over all HW tokens; benchmark reference only."""
    bsz, h, w, c = _spatial_extents(x)
    shape = (bsz, h * w, c) if bsz is not None else (h * w, c)
    xf = reshape(x, shape)
    q = linear(xf, p.q_w, p.q_b)
    k = linear(xf, p.k_w, p.k_b)
    v = linear(xf, p.v_w, p.v_b)
    swap = (0, 2, 1) if bsz is not None else (1, 0)
    scores = div(matmul(q, transpose(k, swap)), math.sqrt(c))
    out = matmul(softmax(scores, axis=-1), v)
    return reshape(out, x.shape)
