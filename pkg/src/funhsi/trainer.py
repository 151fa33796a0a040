"""Training loop: AdamW, warmup + multi-step schedule, crops, checkpoints.

Every random choice (scene order, crop corners, measurement noise) flows
through one Generator whose state rides along in the checkpoint, so a resumed
run replays the exact byte-for-byte trajectory of an uninterrupted one.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cassi
from .data import load_manifest, load_mask, load_scene
from .detection import (
    Annotation,
    assign_targets,
    decode,
    detection_loss,
    head_forward,
    map_at_50,
    stack_targets,
)
from .losses import charbonnier, total_loss
from .metrics import psnr, sam, ssim
from .network import forward
from .tensor import ContractError, DiffTensor, no_grad, zero_grads

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    total_steps: int = 3000
    warmup_steps: int = 500
    milestones: tuple = (2000, 2600)
    decay_factor: float = 0.1
    balance: float = 5.0
    batch_size: int = 2
    crop: int = 64
    noise_sigma: float = 0.005
    seed: int = 0
    mode: str = "both"  # "both" | "recon" | "det"
    clip_norm: float = 1.0
    log_every: int = 25
    checkpoint_every: int = 500
    eval_every: int = 0  # 0 disables periodic validation

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ContractError("decay factor must lie in (0,1)")
        if not self.milestones:
            raise ContractError("schedule needs at least one milestone")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ContractError("milestones must increase: %r" % (self.milestones,))
        if not self.warmup_steps < self.milestones[0] < self.total_steps:
            raise ContractError(
                "need warmup < first milestone < total steps, got %d / %d / %d"
                % (self.warmup_steps, self.milestones[0], self.total_steps)
            )
        if self.mode not in ("both", "recon", "det"):
            raise ContractError("unknown mode %r" % self.mode)
        if self.crop % 8:
            raise ContractError("crop size must be divisible by 8")


def lr_at(step, cfg):
    """Linear warmup to the base lr, then step decay at each milestone."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    passed = sum(1 for m in cfg.milestones if step >= m)
    return cfg.lr * cfg.decay_factor**passed


class AdamWState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adamw_step(params, state, cfg, lr_t):
    """One decoupled-decay AdamW update; a missing grad counts as zero."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= lr_t * (update + cfg.weight_decay * p.data)


def clip_gradients(params, max_norm):
    """Scale all grads so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FUNT"
_CKPT_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_CKPT_CODE = {np.float32: 0, np.float64: 1, np.int64: 2, np.uint8: 3}


def write_tensors(path, tensors):
    parts = [CKPT_MAGIC, struct.pack("<2I", 1, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CKPT_CODE.get(arr.dtype.type)
        if code is None:
            raise ContractError("checkpoint cannot hold dtype %s" % arr.dtype)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        parts.append(struct.pack("<I", code))
        parts.append(np.ascontiguousarray(arr).astype(_CKPT_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ContractError("%s: not a checkpoint (magic %r)" % (path, blob[:4]))
    version, count = struct.unpack_from("<2I", blob, 4)
    if version != 1:
        raise ContractError("%s: unsupported checkpoint version %d" % (path, version))
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from("<%dI" % ndim, blob, off)
        off += 4 * ndim
        (code,) = struct.unpack_from("<I", blob, off)
        off += 4
        dt = _CKPT_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if off != len(blob):
        raise ContractError("%s: %d trailing bytes" % (path, len(blob) - off))
    return out


def _rng_to_tensors(rng):
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ContractError("only PCG64 training streams are checkpointable")
    return {
        "rng.state": np.frombuffer(st["state"]["state"].to_bytes(16, "little"), np.uint8),
        "rng.inc": np.frombuffer(st["state"]["inc"].to_bytes(16, "little"), np.uint8),
        "rng.has_uint32": np.int64(st["has_uint32"]),
        "rng.uinteger": np.int64(st["uinteger"]),
    }


def _rng_from_tensors(t):
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(t["rng.state"].tobytes(), "little"),
            "inc": int.from_bytes(t["rng.inc"].tobytes(), "little"),
        },
        "has_uint32": int(t["rng.has_uint32"]),
        "uinteger": int(t["rng.uinteger"]),
    }
    return np.random.Generator(bg)


def save_checkpoint(path, model, opt_state, step, rng):
    tensors = {"meta.step": np.int64(step), "meta.adamw_t": np.int64(opt_state.t)}
    tensors.update(_rng_to_tensors(rng))
    for name, p in model.named_params().items():
        tensors["param." + name] = p.data
    for name in opt_state.m:
        tensors["adamw.m." + name] = opt_state.m[name]
        tensors["adamw.v." + name] = opt_state.v[name]
    write_tensors(path, tensors)


def load_checkpoint(path, model, opt_state):
    """Restore params/moments in place; returns (step, rng)."""
    t = read_tensors(path)
    params = model.named_params()
    for name, p in params.items():
        src = t["param." + name]
        if src.shape != p.data.shape:
            raise ContractError("checkpoint mismatch on %s: %r vs %r"
                                % (name, src.shape, p.data.shape))
        p.data = src.astype(p.data.dtype, copy=True)
        p.grad = None
    for name in opt_state.m:
        opt_state.m[name] = t["adamw.m." + name].copy()
        opt_state.v[name] = t["adamw.v." + name].copy()
    opt_state.t = int(t["meta.adamw_t"])
    return int(t["meta.step"]), _rng_from_tensors(t)


# ------------------------------------------------------------ training data


def _crop_annotations(anns, top, left, size):
    out = []
    for a in anns:
        x0 = max(a.box[0] - left, 0.0)
        y0 = max(a.box[1] - top, 0.0)
        x1 = min(a.box[2] - left, float(size))
        y1 = min(a.box[3] - top, float(size))
        if x1 - x0 < 2.0 or y1 - y0 < 2.0:  # degenerate sliver, drop
            continue
        out.append(Annotation(class_id=a.class_id, box=(x0, y0, x1, y1)))
    return out


def _geoms(size, strides=(8, 4, 2)):
    return [(s, size[0] // s, size[1] // s) for s in strides]


def _sample_batch(scenes, mask, d, cfg, rng):
    cubes, inits, ann_lists = [], [], []
    idx = rng.integers(0, len(scenes), size=cfg.batch_size)
    for i in idx:
        cube, anns = scenes[i]
        h, w, _ = cube.shape
        top = int(rng.integers(0, h - cfg.crop + 1))
        left = int(rng.integers(0, w - cfg.crop + 1))
        patch = cube[top : top + cfg.crop, left : left + cfg.crop]
        mpatch = mask[top : top + cfg.crop, left : left + cfg.crop]
        noise_seed = int(rng.integers(0, 2**31))
        y = cassi.forward(patch, mpatch, d, sigma=cfg.noise_sigma, seed=noise_seed)
        inits.append(cassi.shift_back(y, d, patch.shape[2]).astype(np.float32))
        cubes.append(patch)
        ann_lists.append(_crop_annotations(anns, top, left, cfg.crop))
    return np.stack(cubes), np.stack(inits), ann_lists


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        self.step = step
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint if last_checkpoint else "no checkpoint written yet"
        super().__init__(
            "non-finite loss at step %d; resume from last good checkpoint: %s"
            % (step, where)
        )


def _step_losses(model, truth, init, ann_lists, cfg):
    out = forward(model, DiffTensor(init))
    zero = DiffTensor(np.zeros((), dtype=np.float32))
    if cfg.mode == "det":
        l_recon = zero
    else:
        l_recon = charbonnier(out.x_hat, DiffTensor(truth))
    if cfg.mode == "recon":
        l_reg = l_cls = l_ctr = zero
    else:
        geoms = _geoms(truth.shape[1:3])
        levels = head_forward(model.head, out.pyramid, out.strides)
        targets = stack_targets([assign_targets(a, geoms) for a in ann_lists])
        l_reg, l_cls, l_ctr = detection_loss(levels, targets)
    balance = {"both": cfg.balance, "recon": 1.0, "det": 0.0}[cfg.mode]
    return total_loss(l_reg, l_cls, l_ctr, l_recon, balance=balance)


def train(model, dataset_dir, cfg, out_dir, start_checkpoint=None):
    """Run cfg.total_steps of training; returns the list of log rows.

    Writes checkpoints and an append-only metrics.log under out_dir. With
    start_checkpoint the loop continues from that state (same rng stream).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(dataset_dir)
    scenes = [load_scene(dataset_dir, e["name"]) for e in manifest["train"]]
    if not scenes:
        raise ContractError("dataset %s has no training scenes" % dataset_dir)
    mask = load_mask(dataset_dir, manifest)
    d = cassi.DispersionSpec()

    params = model.named_params()
    opt = AdamWState(params)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if start_checkpoint is not None:
        start, rng = load_checkpoint(start_checkpoint, model, opt)

    log_path = out / "metrics.log"
    rows = []
    last_ckpt = str(start_checkpoint) if start_checkpoint else None
    with open(log_path, "a") as logf:
        for step in range(start, cfg.total_steps):
            truth, init, ann_lists = _sample_batch(scenes, mask, d, cfg, rng)
            zero_grads(params.values())
            total, report = _step_losses(model, truth, init, ann_lists, cfg)
            if not np.isfinite(report.total):
                raise TrainingDiverged(step, last_ckpt)
            total.backward()
            grad_norm = clip_gradients(params, cfg.clip_norm)
            lr = lr_at(step, cfg)
            adamw_step(params, opt, cfg, lr)

            row = {
                "step": step,
                "lr": lr,
                "grad_norm": float(grad_norm),
                "total": report.total,
                "recon": report.recon,
                "reg": report.reg,
                "cls": report.cls,
                "ctr": report.ctr,
            }
            rows.append(row)
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
                logf.write(
                    "step=%d lr=%.3e grad=%.3f %s\n"
                    % (step, lr, grad_norm, report.as_row())
                )
                logf.flush()
            done = step + 1
            if cfg.checkpoint_every and (
                done % cfg.checkpoint_every == 0 or done == cfg.total_steps
            ):
                path = out / ("ckpt_%06d.funt" % done)
                save_checkpoint(path, model, opt, done, rng)
                last_ckpt = str(path)
            if cfg.eval_every and done % cfg.eval_every == 0 and done != cfg.total_steps:
                metrics = evaluate(model, dataset_dir, "val", cfg)
                logf.write(eval_line(done, metrics) + "\n")
                logf.flush()
    return rows


def eval_line(step, metrics):
    """One-line metric table; the eval command must reproduce it verbatim."""
    return (
        "eval step=%d psnr=%.3f baseline=%.3f ssim=%.4f sam=%.3f map50=%.4f"
        % (step, metrics["psnr"], metrics["psnr_baseline"], metrics["ssim"],
           metrics["sam"], metrics["map50"])
    )


def evaluate(model, dataset_dir, split, cfg, score_thresh=0.05):
    """Deterministic metrics over a split: reconstruction quality and mAP.

    Also reports the shift-back initialization PSNR as a floor to beat.
    """
    manifest = load_manifest(dataset_dir)
    mask = load_mask(dataset_dir, manifest)
    d = cassi.DispersionSpec()
    psnrs, base_psnrs, ssims, sams = [], [], [], []
    dets_per_image, anns_per_image = [], []
    num_classes = manifest["spec"]["num_classes"]
    for i, entry in enumerate(manifest[split]):
        cube, anns = load_scene(dataset_dir, entry["name"])
        y = cassi.forward(cube, mask, d, sigma=cfg.noise_sigma, seed=900000 + i)
        init = cassi.shift_back(y, d, cube.shape[2]).astype(np.float32)
        with no_grad():
            out = forward(model, DiffTensor(init))
            levels = head_forward(model.head, out.pyramid, out.strides)
        x_hat = np.clip(out.x_hat.data, 0.0, 1.0)
        psnrs.append(psnr(x_hat, cube))
        base_psnrs.append(psnr(np.clip(init, 0.0, 1.0), cube))
        ssims.append(ssim(x_hat, cube))
        sams.append(sam(x_hat, cube))
        geoms = _geoms(cube.shape[:2])
        dets_per_image.append(decode(levels, geoms, score_thresh=score_thresh))
        anns_per_image.append(anns)
    return {
        "n": len(psnrs),
        "psnr": float(np.mean(psnrs)),
        "psnr_baseline": float(np.mean(base_psnrs)),
        "ssim": float(np.mean(ssims)),
        "sam": float(np.mean(sams)),
        "map50": map_at_50(dets_per_image, anns_per_image, num_classes),
    }
