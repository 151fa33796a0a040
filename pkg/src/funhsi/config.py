"""Run configuration: nested defaults, file/CLI merging, dataclass builders.

The schema is exactly the set of default keys; merging anything outside it
fails loudly instead of silently training with a typo.
"""

import json
from pathlib import Path

from .data import SceneSpec
from .network import FunConfig
from .tensor import ContractError
from .trainer import TrainConfig


def default_config():
    return {
        "scene": {
            "h": 64,
            "w": 64,
            "bands": 8,
            "num_classes": 5,
            "objects": [3, 7],
            "size_range": [9, 20],
            "large_size_range": [34, 48],
            "large_prob": 0.15,
            "seed": 0,
        },
        "dataset": {
            "n_train": 128,
            "n_val": 32,
            "mask_density": 0.5,
            "seed": 0,
        },
        "model": {
            "base_channels": 16,
            "depths": [1, 1, 1, 2, 1, 1],
            "fsm_levels": 2,
            "fsm_kernels": [3, 5],
            "lrsm_rank": 0,
            "lrsm_bank": 32,
            "ffn_expand": 4,
            "schedule": "double",
            "head_channels": 32,
            "init_seed": 0,
        },
        "train": {
            "lr": 2e-4,
            "beta1": 0.9,
            "beta2": 0.999,
            "weight_decay": 1e-4,
            "total_steps": 3000,
            "warmup_steps": 500,
            "milestones": [2000, 2600],
            "decay_factor": 0.1,
            "balance": 5.0,
            "batch_size": 2,
            "crop": 64,
            "noise_sigma": 0.005,
            "seed": 0,
            "mode": "both",
            "clip_norm": 1.0,
            "log_every": 25,
            "checkpoint_every": 500,
            "eval_every": 0,
        },
    }


def merge_config(base, override, path=""):
    """Recursive merge; keys absent from base are contract errors."""
    out = dict(base)
    for key, value in override.items():
        here = path + key
        if key not in base:
            raise ContractError("unknown config key %r" % here)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ContractError("config key %r must be a section" % here)
            out[key] = merge_config(base[key], value, here + ".")
        else:
            if isinstance(value, dict):
                raise ContractError("config key %r is not a section" % here)
            out[key] = value
    return out


def load_config(path=None, overrides=()):
    """Defaults, optionally overlaid with a JSON file and key=value pairs."""
    cfg = default_config()
    if path is not None:
        cfg = merge_config(cfg, json.loads(Path(path).read_text()))
    for item in overrides:
        if "=" not in item:
            raise ContractError("override %r is not key.path=value" % item)
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        leaf = node
        keys = dotted.split(".")
        for k in keys[:-1]:
            leaf[k] = {}
            leaf = leaf[k]
        leaf[keys[-1]] = value
        cfg = merge_config(cfg, node)
    return cfg


def echo_config(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def scene_spec(cfg):
    s = cfg["scene"]
    return SceneSpec(
        h=s["h"],
        w=s["w"],
        bands=s["bands"],
        num_classes=s["num_classes"],
        objects=tuple(s["objects"]),
        size_range=tuple(s["size_range"]),
        large_size_range=tuple(s["large_size_range"]),
        large_prob=s["large_prob"],
        seed=s["seed"],
    )


def fun_config(cfg, spec):
    """Model config; bands/classes always come from the dataset, not the file."""
    m = cfg["model"]
    return FunConfig(
        bands=spec.bands,
        base_channels=m["base_channels"],
        depths=tuple(m["depths"]),
        num_classes=spec.num_classes,
        fsm_levels=m["fsm_levels"],
        fsm_kernels=tuple(m["fsm_kernels"]),
        lrsm_rank=m["lrsm_rank"],
        lrsm_bank=m["lrsm_bank"],
        ffn_expand=m["ffn_expand"],
        schedule=m["schedule"],
        head_channels=m["head_channels"],
    )


def train_config(cfg):
    t = dict(cfg["train"])
    t["milestones"] = tuple(t["milestones"])
    return TrainConfig(**t)
