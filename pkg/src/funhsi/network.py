"""Six-stage U-shaped backbone with residual reconstruction and a pyramid head.

Stages 1-3 encode (each followed by a 2x2 stride-2 conv that doubles
channels), stage 4 is the bottleneck, stages 5-6 decode (each preceded by a
2x2 stride-2 transposed conv that halves channels, fused with the matching
encoder stage by concat + 1x1 linear). A final upsample and 3x3 projection
emit the residual R at full resolution; the reconstruction is input + R.
Outputs of stages 4, 5, 6 (strides 8, 4, 2) feed the detection head.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import cassi
from .blocks import (
    SsmbParams,
    _conv_init,
    _linear_init,
    default_rank,
    ssmb_config,
    ssmb_forward,
)
from .detection import DetectionHead
from .tensor import (
    ContractError,
    DiffTensor,
    add,
    concat,
    conv2d,
    linear,
    no_grad,
    transposed_conv2d,
)


@dataclass(frozen=True)
class FunConfig:
    bands: int = 8
    base_channels: int = 16
    depths: tuple = (1, 1, 1, 2, 1, 1)
    num_classes: int = 5
    fsm_levels: int = 2
    fsm_kernels: tuple = (3, 5)
    lrsm_rank: int = 0  # 0 picks max(4, C/4) per stage
    lrsm_bank: int = 32
    ffn_expand: int = 4
    schedule: str = "double"  # "double" or "capped"
    head_channels: int = 32

    def __post_init__(self):
        if len(self.depths) != 6 or any(d < 1 for d in self.depths):
            raise ContractError("depths must be six integers >= 1, got %r" % (self.depths,))
        if self.schedule not in ("double", "capped"):
            raise ContractError("unknown channel schedule %r" % self.schedule)
        if self.bands < 1 or self.base_channels < 1:
            raise ContractError("bands and base_channels must be >= 1")

    def stage_channels(self):
        c = self.base_channels
        if self.schedule == "double":
            return (c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c)
        return (c, 2 * c, 4 * c, 4 * c, 4 * c, 2 * c)

    def stage_block_config(self, stage_idx):
        c = self.stage_channels()[stage_idx]
        rank = self.lrsm_rank if self.lrsm_rank else default_rank(c)
        return ssmb_config(
            channels=c,
            levels=self.fsm_levels,
            kernels=self.fsm_kernels,
            rank=rank,
            bank=self.lrsm_bank,
            ffn_expand=self.ffn_expand,
        )


def _tconv_init(rng, kh, kw, cin, cout, dtype):
    # kernel layout [kh,kw,Cout,Cin], matching the adjoint pairing with conv2d
    std = math.sqrt(2.0 / (kh * kw * (cin + cout)))
    k = DiffTensor(rng.normal(0.0, std, (kh, kw, cout, cin)).astype(dtype), requires_grad=True)
    b = DiffTensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return k, b


@dataclass
class FunOutputs:
    residual: DiffTensor
    x_hat: DiffTensor
    pyramid: tuple  # stage 4, 5, 6 features
    strides: tuple = (8, 4, 2)


class FunModel:
    """Parameters and wiring; build once, then call forward()."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        ch = cfg.stage_channels()
        self.stage_cfgs = [cfg.stage_block_config(i) for i in range(6)]

        self.embed = _conv_init(rng, 3, 3, cfg.bands, ch[0], dtype)
        self.stages = [
            [SsmbParams(self.stage_cfgs[i], rng, dtype) for _ in range(cfg.depths[i])]
            for i in range(6)
        ]
        # encoder downsamplers between stages 1->2, 2->3, 3->4
        self.downs = [_conv_init(rng, 2, 2, ch[i], ch[i + 1], dtype) for i in range(3)]
        # decoder upsamplers into stages 5 and 6, fused with encoder skips
        self.ups = []
        self.fuses = []
        for src, dst, skip in ((3, 4, 2), (4, 5, 1)):
            self.ups.append(_tconv_init(rng, 2, 2, ch[src], ch[dst], dtype))
            self.fuses.append(_linear_init(rng, ch[dst] + ch[skip], ch[dst], dtype))
        self.final_up = _tconv_init(rng, 2, 2, ch[5], cfg.base_channels, dtype)
        self.final_proj = _conv_init(rng, 3, 3, cfg.base_channels, cfg.bands, dtype)
        self.head = DetectionHead(
            in_channels=(ch[3], ch[4], ch[5]),
            num_classes=cfg.num_classes,
            head_channels=cfg.head_channels,
            rng=rng,
            dtype=dtype,
        )

    def named_params(self):
        out = {}

        def put(name, t):
            out[name] = t

        put("embed.k", self.embed[0])
        put("embed.b", self.embed[1])
        for si, blocks in enumerate(self.stages):
            for bi, blk in enumerate(blocks):
                for name, t in blk.items():
                    put("s%d.b%d.%s" % (si + 1, bi, name), t)
        for i, (k, b) in enumerate(self.downs):
            put("down%d.k" % i, k)
            put("down%d.b" % i, b)
        for i, (k, b) in enumerate(self.ups):
            put("up%d.k" % i, k)
            put("up%d.b" % i, b)
        for i, (w, b) in enumerate(self.fuses):
            put("fuse%d.w" % i, w)
            put("fuse%d.b" % i, b)
        put("final_up.k", self.final_up[0])
        put("final_up.b", self.final_up[1])
        put("final_proj.k", self.final_proj[0])
        put("final_proj.b", self.final_proj[1])
        for name, t in self.head.items():
            put("head.%s" % name, t)
        return out

    def param_count(self):
        return sum(t.data.size for t in self.named_params().values())


def build(cfg, seed=0, dtype=np.float32):
    return FunModel(cfg, seed=seed, dtype=dtype)


def _run_stage(x, cfg, blocks):
    for p in blocks:
        x = ssmb_forward(x, cfg, p)
    return x


def forward(model, h_input):
    """Full pass over the shift-back initialization (or any cube tensor).

    h_input: [H,W,Nband] or [B,H,W,Nband]; H, W must be divisible by 8,
    there is no implicit padding.
    """
    x = h_input if isinstance(h_input, DiffTensor) else DiffTensor(
        np.asarray(h_input, dtype=model.dtype)
    )
    if x.ndim not in (3, 4):
        raise ContractError("input must be [H,W,Nband] or [B,H,W,Nband]")
    h, w = x.shape[-3], x.shape[-2]
    if h % 8 or w % 8:
        raise ContractError("spatial extents must be divisible by 8, got %dx%d" % (h, w))
    if x.shape[-1] != model.cfg.bands:
        raise ContractError(
            "expected %d bands, got %d" % (model.cfg.bands, x.shape[-1])
        )

    e = add(conv2d(x, model.embed[0], stride=1, padding=1), model.embed[1])
    s1 = _run_stage(e, model.stage_cfgs[0], model.stages[0])
    d1 = add(conv2d(s1, model.downs[0][0], stride=2, padding=0), model.downs[0][1])
    s2 = _run_stage(d1, model.stage_cfgs[1], model.stages[1])
    d2 = add(conv2d(s2, model.downs[1][0], stride=2, padding=0), model.downs[1][1])
    s3 = _run_stage(d2, model.stage_cfgs[2], model.stages[2])
    d3 = add(conv2d(s3, model.downs[2][0], stride=2, padding=0), model.downs[2][1])
    s4 = _run_stage(d3, model.stage_cfgs[3], model.stages[3])

    u5 = add(transposed_conv2d(s4, model.ups[0][0], stride=2), model.ups[0][1])
    f5 = linear(concat([u5, s3], axis=-1), model.fuses[0][0], model.fuses[0][1])
    s5 = _run_stage(f5, model.stage_cfgs[4], model.stages[4])

    u6 = add(transposed_conv2d(s5, model.ups[1][0], stride=2), model.ups[1][1])
    f6 = linear(concat([u6, s2], axis=-1), model.fuses[1][0], model.fuses[1][1])
    s6 = _run_stage(f6, model.stage_cfgs[5], model.stages[5])

    uf = add(transposed_conv2d(s6, model.final_up[0], stride=2), model.final_up[1])
    r = add(conv2d(uf, model.final_proj[0], stride=1, padding=1), model.final_proj[1])
    x_hat = add(x, r)
    return FunOutputs(residual=r, x_hat=x_hat, pyramid=(s4, s5, s6))


def reconstruct(model, y, m, d):
    """shift_back, network pass, residual add; returns the cube as numpy.

    The mask is accepted alongside the measurement for interface parity, the
    initialization itself needs only the dispersion shifts.
    """
    del m
    h = cassi.shift_back(y, d, model.cfg.bands)
    with no_grad():
        out = forward(model, h.astype(model.dtype))
    return out.x_hat.data
