"""Command line entry points for the full pipeline.

    funhsi gen-data    --out DIR [--scenes N --val M --seed S]
    funhsi simulate    --cube F --mask F --out F [--sigma S --seed S]
    funhsi train       --dataset DIR --out DIR [--config F --resume CKPT]
    funhsi eval        --ckpt F --dataset DIR [--split val]
    funhsi reconstruct --ckpt F --measurement F --out F
    funhsi detect      --ckpt F --measurement F --out F [--overlay DIR]
    funhsi bench       [--sizes 8,16,32,64 --channels 16]
    funhsi grad-check  [--module all --seed S]

Every command is deterministic given its seeds. Bad inputs (missing files,
malformed containers, unknown config keys) exit nonzero with a one-line
diagnostic instead of a traceback.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import cassi
from .blocks import (
    AttentionParams,
    FsmConfig,
    FsmParams,
    SsmbParams,
    fsm_forward,
    naive_self_attention,
    ssmb_config,
    ssmb_forward,
)
from .config import echo_config, fun_config, load_config, scene_spec, train_config
from .data import (
    generate_dataset,
    load_cube,
    load_manifest,
    save_cube,
    spec_from_manifest,
)
from .detection import (
    Annotation,
    LevelOutputs,
    assign_targets,
    decode,
    detection_loss,
    head_forward,
    stack_targets,
)
from .gradcheck import fd_check, rand64
from .losses import charbonnier
from .network import FunConfig, build, forward, reconstruct
from .tensor import (
    ContractError,
    DiffTensor,
    ShapeError,
    add,
    conv2d,
    count_macs,
    gelu,
    layer_norm,
    linear,
    mul,
    no_grad,
    sigmoid,
    softmax,
    texp,
    tmean,
    tsum,
)
from .trainer import AdamWState, TrainingDiverged, eval_line, evaluate, load_checkpoint, train


# --------------------------------------------------------------- shared bits


def _spec_section(spec):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def _load_measurement(path):
    cube = load_cube(path)
    if cube.shape[2] != 1:
        raise ContractError(
            "measurement %s holds %d planes, expected 1" % (path, cube.shape[2])
        )
    return cube[:, :, 0]


def _ckpt_model(args):
    """Rebuild the model a checkpoint belongs to and load it.

    The config defaults to the config.json echoed next to the checkpoint by
    the training run; --config / --set override it.
    """
    ckpt = Path(args.ckpt)
    config_path = args.config
    if config_path is None:
        sibling = ckpt.parent / "config.json"
        if sibling.exists():
            config_path = sibling
    cfg = load_config(config_path, args.set)
    spec = scene_spec(cfg)
    model = build(fun_config(cfg, spec), seed=cfg["model"]["init_seed"])
    step, _ = load_checkpoint(str(ckpt), model, AdamWState(model.named_params()))
    return model, cfg, step


# ----------------------------------------------------------------- commands


def cmd_gen_data(args):
    cfg = load_config(args.config, args.set)
    ds = cfg["dataset"]
    if args.scenes is not None:
        ds["n_train"] = args.scenes
    if args.val is not None:
        ds["n_val"] = args.val
    if args.seed is not None:
        ds["seed"] = args.seed
    spec = scene_spec(cfg)
    generate_dataset(
        args.out,
        spec,
        n_train=ds["n_train"],
        n_val=ds["n_val"],
        seed=ds["seed"],
        mask_density=ds["mask_density"],
    )
    print(
        "wrote %d train + %d val scenes (%dx%dx%d, %d classes) to %s"
        % (ds["n_train"], ds["n_val"], spec.h, spec.w, spec.bands, spec.num_classes, args.out)
    )
    return 0


def cmd_simulate(args):
    x = load_cube(args.cube)
    m = load_cube(args.mask)[:, :, 0]
    meas = cassi.forward(x, m, cassi.DispersionSpec(), sigma=args.sigma, seed=args.seed)
    save_cube(args.out, meas.values[:, :, None].astype(np.float32))
    print(
        "measurement %dx%d (sigma=%g) -> %s"
        % (meas.values.shape[0], meas.values.shape[1], args.sigma, args.out)
    )
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    manifest = load_manifest(args.dataset)
    spec = spec_from_manifest(manifest)
    # bands / classes always follow the dataset; echo what actually ran
    cfg["scene"] = _spec_section(spec)
    echo_config(cfg, args.out)
    model = build(fun_config(cfg, spec), seed=cfg["model"]["init_seed"])
    tcfg = train_config(cfg)
    rows = train(model, args.dataset, tcfg, args.out, start_checkpoint=args.resume)
    metrics = evaluate(model, args.dataset, "val", tcfg)
    line = eval_line(tcfg.total_steps, metrics)
    with open(Path(args.out) / "metrics.log", "a") as f:
        f.write(line + "\n")
    if rows:
        print("trained steps %d..%d, final total=%.4f" % (rows[0]["step"], rows[-1]["step"], rows[-1]["total"]))
    print(line)
    return 0


def cmd_eval(args):
    model, cfg, step = _ckpt_model(args)
    manifest = load_manifest(args.dataset)
    if manifest["spec"]["bands"] != model.cfg.bands:
        raise ContractError(
            "dataset has %d bands, checkpoint expects %d"
            % (manifest["spec"]["bands"], model.cfg.bands)
        )
    metrics = evaluate(model, args.dataset, args.split, train_config(cfg))
    print(eval_line(step, metrics))
    return 0


def cmd_reconstruct(args):
    model, _, step = _ckpt_model(args)
    y = _load_measurement(args.measurement)
    x_hat = reconstruct(model, y, None, cassi.DispersionSpec())
    save_cube(args.out, x_hat.astype(np.float32))
    print(
        "reconstructed %dx%dx%d cube (checkpoint step %d) -> %s"
        % (x_hat.shape[0], x_hat.shape[1], x_hat.shape[2], step, args.out)
    )
    return 0


def cmd_detect(args):
    model, _, step = _ckpt_model(args)
    y = _load_measurement(args.measurement)
    init = cassi.shift_back(y, cassi.DispersionSpec(), model.cfg.bands).astype(np.float32)
    with no_grad():
        out = forward(model, DiffTensor(init))
        levels = head_forward(model.head, out.pyramid, out.strides)
    geoms = [(s, init.shape[0] // s, init.shape[1] // s) for s in out.strides]
    dets = decode(levels, geoms, score_thresh=args.score_thresh)
    lines = [
        "%d %.6f %.2f %.2f %.2f %.2f" % ((dt.class_id, dt.score) + tuple(dt.box))
        for dt in dets
    ]
    Path(args.out).write_text("".join(line + "\n" for line in lines))
    if args.overlay is not None:
        _write_overlays(args.overlay, np.clip(out.x_hat.data, 0.0, 1.0), dets)
    print("%d detections (checkpoint step %d) -> %s" % (len(dets), step, args.out))
    return 0


def _write_overlays(out_dir, cube, dets):
    from PIL import Image, ImageDraw

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in range(cube.shape[2]):
        img = Image.fromarray((cube[:, :, b] * 255.0).astype(np.uint8)).convert("RGB")
        draw = ImageDraw.Draw(img)
        for dt in dets:
            draw.rectangle(tuple(dt.box), outline=(255, 64, 64))
            draw.text((dt.box[0] + 2.0, dt.box[1] + 1.0), str(dt.class_id), fill=(255, 64, 64))
        img.save(out / ("band_%02d.png" % b))


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if not sizes or any(s < 8 for s in sizes):
        raise ContractError("--sizes wants a comma list of ints >= 8, got %r" % args.sizes)
    c = args.channels
    rng = np.random.default_rng(args.seed)
    fcfg = FsmConfig(channels=c)
    fsm_p = FsmParams(fcfg, rng, dtype=np.float64)
    attn_p = AttentionParams(c, rng, dtype=np.float64)
    print("channels=%d" % c)
    print("%6s %8s %14s %14s %8s" % ("size", "tokens", "modulation", "attention", "ratio"))
    for s in sizes:
        x = DiffTensor(rng.standard_normal((s, s, c)))
        with count_macs() as fm:
            fsm_forward(x, fcfg, fsm_p)
        with count_macs() as am:
            naive_self_attention(x, attn_p)
        print(
            "%6d %8d %14d %14d %8.1f"
            % (s, s * s, fm.total, am.total, am.total / fm.total)
        )
    return 0


# ---------------------------------------------------------------- grad-check


def _suite_tensor(seed):
    rng = np.random.default_rng(seed)
    x = DiffTensor(rand64(rng, 3, 5, 4), requires_grad=True)
    w = DiffTensor(rand64(rng, 4, 6), requires_grad=True)
    b = DiffTensor(rand64(rng, 6), requires_grad=True)
    g = DiffTensor(np.ones(4), requires_grad=True)
    be = DiffTensor(np.zeros(4), requires_grad=True)
    k = DiffTensor(rand64(rng, 3, 3, 4, 5) * 0.2, requires_grad=True)
    checks = [
        ("linear+gelu", lambda: tmean(gelu(linear(x, w, b))), [x, w, b]),
        ("softmax*sigmoid", lambda: tsum(mul(softmax(x, axis=-1), sigmoid(x))), [x]),
        ("layer_norm", lambda: tmean(mul(layer_norm(x, g, be), x)), [x, g, be]),
        ("conv2d", lambda: tsum(gelu(conv2d(x, k, stride=1, padding=1))), [x, k]),
    ]
    return [(name, fd_check(f, leaves, points=4, seed=seed)) for name, f, leaves in checks]


def _suite_blocks(seed):
    rng = np.random.default_rng(seed)
    cfg = ssmb_config(8)
    p = SsmbParams(cfg, rng, dtype=np.float64)
    x = DiffTensor(rand64(rng, 6, 6, 8), requires_grad=True)
    leaves = [x] + [t for _, t in p.items()]
    err = fd_check(lambda: tmean(mul(ssmb_forward(x, cfg, p), x)), leaves, points=2, seed=seed)
    return [("ssmb_forward", err)]


def _suite_network(seed):
    rng = np.random.default_rng(seed)
    cfg = FunConfig(bands=4, base_channels=4, depths=(1,) * 6, num_classes=2, head_channels=4)
    model = build(cfg, seed=seed, dtype=np.float64)
    x = rand64(rng, 16, 16, 4) * 0.5

    def f():
        out = forward(model, DiffTensor(x))
        total = tsum(out.x_hat)
        for lv in head_forward(model.head, out.pyramid, out.strides):
            total = add(total, add(tsum(lv.cls), add(tsum(lv.ltrb), tsum(lv.ctr))))
        return total

    params = model.named_params()
    names = sorted(params)
    picks = rng.choice(len(names), size=8, replace=False)
    leaves = [params[names[i]] for i in picks]
    return [("network+head", fd_check(f, leaves, points=2, seed=seed))]


def _suite_detection(seed):
    rng = np.random.default_rng(seed)
    geoms = [(8, 2, 2), (4, 4, 4), (2, 8, 8)]
    anns = [Annotation(0, (2.0, 2.0, 13.0, 13.0)), Annotation(1, (3.0, 6.0, 10.0, 15.0))]
    targets = stack_targets([assign_targets(anns, geoms)])
    raws, leaves = [], []
    for s, hl, wl in geoms:
        cls = DiffTensor(rand64(rng, 1, hl, wl, 2), requires_grad=True)
        # exp keeps regression distances positive, like the head does
        raw = DiffTensor(np.log(s * 0.8) + 0.3 * rand64(rng, 1, hl, wl, 4), requires_grad=True)
        ctr = DiffTensor(rand64(rng, 1, hl, wl, 1), requires_grad=True)
        raws.append((cls, raw, ctr))
        leaves += [cls, raw, ctr]

    def f():
        levels = [LevelOutputs(c, texp(r), t) for c, r, t in raws]
        l_reg, l_cls, l_ctr = detection_loss(levels, targets)
        return add(add(l_reg, l_cls), l_ctr)

    return [("detection_loss", fd_check(f, leaves, points=3, seed=seed))]


def _suite_losses(seed):
    rng = np.random.default_rng(seed)
    a = DiffTensor(rand64(rng, 6, 6, 3), requires_grad=True)
    b = DiffTensor(rand64(rng, 6, 6, 3))
    err = fd_check(lambda: charbonnier(a, b), [a], points=6, seed=seed)
    return [("charbonnier", err)]


GRAD_SUITES = {
    "tensor": (_suite_tensor, 1e-4),
    "blocks": (_suite_blocks, 1e-4),
    "network": (_suite_network, 1e-3),
    "detection": (_suite_detection, 1e-4),
    "losses": (_suite_losses, 1e-6),
}


def cmd_grad_check(args):
    names = list(GRAD_SUITES) if args.module == "all" else [args.module]
    for name in names:
        if name not in GRAD_SUITES:
            raise ContractError(
                "unknown module %r (choices: all, %s)" % (name, ", ".join(GRAD_SUITES))
            )
    failed = 0
    for name in names:
        suite, tol = GRAD_SUITES[name]
        for check, err in suite(args.seed):
            ok = err < tol
            failed += not ok
            print("%-10s %-18s max_rel_err=%.3e tol=%.0e %s" % (name, check, err, tol, "ok" if ok else "FAIL"))
    return 1 if failed else 0


# ------------------------------------------------------------------- parser


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser():
    p = argparse.ArgumentParser(
        prog="funhsi",
        description="Snapshot spectral imaging: simulate, train, reconstruct, detect.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a labeled scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=None, help="training scenes")
    g.add_argument("--val", type=int, default=None, help="validation scenes")
    g.add_argument("--seed", type=int, default=None)
    _add_config_flags(g)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", help="run the optical forward model on a cube")
    s.add_argument("--cube", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    _add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", help="recover a cube from a measurement")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--measurement", required=True)
    r.add_argument("--out", required=True)
    _add_config_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    d = sub.add_parser("detect", help="detect objects in a measurement")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--measurement", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--overlay", default=None, help="directory for per-band PNG overlays")
    d.add_argument("--score-thresh", type=float, default=0.05)
    _add_config_flags(d)
    d.set_defaults(func=cmd_detect)

    b = sub.add_parser("bench", help="modulation vs self-attention MAC counts")
    b.add_argument("--sizes", default="8,16,32,64")
    b.add_argument("--channels", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("grad-check", help="finite-difference gradient audit")
    c.add_argument("--module", default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ShapeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print("error: missing file: %s" % exc, file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print("error: bad config JSON: %s" % exc, file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
