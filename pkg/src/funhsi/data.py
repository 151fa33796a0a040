"""Synthetic scenes, spectral signatures, the binary cube container and the
dataset layout on disk.

A scene is a low-frequency textured background plus a handful of disjoint
rectangles/ellipses, each painted with its class signature under a linear
shading gradient. Annotations are tight boxes around the painted pixels.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .detection import Annotation
from .tensor import ContractError, ShapeError

MAGIC = b"FUNH"
CONTAINER_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.float32: 0, np.float64: 1}

MAX_SIGNATURE_CORR = 0.95


# ----------------------------------------------------------------- container


def save_cube(path, x):
    """Write [H,W,N] as magic, version, dims, dtype code, band-sequential LE."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError("expected [H,W,N], got %r" % (x.shape,))
    code = _CODE_OF.get(x.dtype.type)
    if code is None:
        raise ContractError("unsupported dtype %s (want float32/float64)" % x.dtype)
    h, w, n = x.shape
    header = MAGIC + struct.pack("<5I", CONTAINER_VERSION, h, w, n, code)
    payload = np.ascontiguousarray(x.transpose(2, 0, 1)).astype(_DTYPE_CODES[code])
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def load_cube(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContractError("%s: bad magic %r" % (path, blob[:4]))
    version, h, w, n, code = struct.unpack_from("<5I", blob, 4)
    if version != CONTAINER_VERSION:
        raise ContractError("%s: unsupported container version %d" % (path, version))
    if code not in _DTYPE_CODES:
        raise ContractError("%s: unknown dtype code %d" % (path, code))
    dt = _DTYPE_CODES[code]
    want = 24 + h * w * n * dt.itemsize
    if len(blob) != want:
        raise ContractError("%s: size %d, expected %d" % (path, len(blob), want))
    flat = np.frombuffer(blob, dtype=dt, offset=24)
    native = np.float32 if code == 0 else np.float64
    return flat.reshape(n, h, w).transpose(1, 2, 0).astype(native, copy=True)


def save_annotations(path, annotations):
    lines = [
        "%d %g %g %g %g" % ((a.class_id,) + tuple(a.box)) for a in annotations
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_annotations(path):
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        out.append(Annotation(class_id=int(parts[0]), box=tuple(float(v) for v in parts[1:5])))
    return out


# -------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneSpec:
    h: int = 64
    w: int = 64
    bands: int = 8
    num_classes: int = 5
    objects: tuple = (3, 7)  # uniform count per scene, inclusive
    size_range: tuple = (9, 20)
    large_size_range: tuple = (34, 48)
    large_prob: float = 0.15
    seed: int = 0  # fixes the class signatures for the whole dataset

    def __post_init__(self):
        if self.size_range[0] < 4:
            raise ContractError("minimum object size is 4 px")
        if self.size_range[0] > self.size_range[1]:
            raise ContractError("bad size_range %r" % (self.size_range,))
        if self.size_range[1] > min(self.h, self.w) - 2:
            raise ContractError("objects cannot fit inside %dx%d" % (self.h, self.w))
        if self.num_classes < 1 or self.bands < 2:
            raise ContractError("need at least 1 class and 2 bands")


def class_signatures(spec):
    """[num_classes + 1, bands]; the last row shades the background.

    Each curve is 1-3 Gaussian bumps over the band index, peak-normalized.
    Rows are resampled until every pairwise correlation stays below 0.95.
    """
    rng = np.random.default_rng(spec.seed)
    n = np.arange(spec.bands, dtype=np.float64)
    rows = []
    for _ in range(spec.num_classes + 1):
        for attempt in range(200):
            curve = np.zeros(spec.bands)
            for _ in range(rng.integers(1, 4)):
                mu = rng.uniform(0.0, spec.bands - 1.0)
                width = rng.uniform(0.6, spec.bands / 3.0)
                amp = rng.uniform(0.5, 1.0)
                curve += amp * np.exp(-((n - mu) ** 2) / (2.0 * width * width))
            curve /= curve.max()
            if all(np.corrcoef(curve, r)[0, 1] < MAX_SIGNATURE_CORR for r in rows):
                rows.append(curve)
                break
        else:
            raise ContractError(
                "could not draw %d separable signatures over %d bands"
                % (spec.num_classes + 1, spec.bands)
            )
    return np.stack(rows)


def _lowfreq(rng, h, w, cell=8):
    """Smooth field in [0, 1]: a coarse grid blown up bilinearly."""
    gh = -(-h // cell) + 1
    gw = -(-w // cell) + 1
    grid = rng.random((gh, gw))
    field = ndimage.zoom(grid, cell, order=1)[:h, :w]
    span = field.max() - field.min()
    return (field - field.min()) / (span if span > 0 else 1.0)


def _object_mask(shape, height, width):
    if shape == "rect":
        return np.ones((height, width), dtype=bool)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ry, rx = height / 2.0, width / 2.0
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def paint_object(cube, signature, top, left, height, width, shape="rect", shading=None):
    """Paint one object in place; returns its tight (x_min,y_min,x_max,y_max).

    shading is an optional [height, width] brightness map; default is flat 1.
    """
    mask = _object_mask(shape, height, width)
    if shading is None:
        shading = np.ones((height, width))
    region = cube[top : top + height, left : left + width]
    region[mask] = shading[mask][:, None] * signature[None, :]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (
        float(left + cols[0]),
        float(top + rows[0]),
        float(left + cols[-1] + 1),
        float(top + rows[-1] + 1),
    )


def _gradient_shading(rng, height, width):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    t = np.cos(theta) * xx / max(width - 1, 1) + np.sin(theta) * yy / max(height - 1, 1)
    span = t.max() - t.min()
    t = (t - t.min()) / (span if span > 0 else 1.0)
    return 0.6 + 0.4 * t


def generate_scene(spec, scene_seed):
    """One deterministic (cube, annotations) pair.

    The background uses the dedicated last signature row scaled into a dim
    low-frequency brightness field, so objects stand out both spatially and
    spectrally.
    """
    rng = np.random.default_rng(scene_seed)
    sigs = class_signatures(spec)
    brightness = 0.2 + 0.3 * _lowfreq(rng, spec.h, spec.w)
    cube = (brightness[:, :, None] * sigs[-1][None, None, :]).astype(np.float64)

    occupied = np.zeros((spec.h, spec.w), dtype=bool)
    annotations = []
    count = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    for _ in range(count):
        for _attempt in range(40):
            large = rng.random() < spec.large_prob
            lo, hi = spec.large_size_range if large else spec.size_range
            if hi > min(spec.h, spec.w) - 2:
                lo, hi = spec.size_range
            height = int(rng.integers(lo, hi + 1))
            width = int(rng.integers(lo, hi + 1))
            top = int(rng.integers(1, spec.h - height))
            left = int(rng.integers(1, spec.w - width))
            if occupied[top : top + height, left : left + width].any():
                continue
            cls = int(rng.integers(0, spec.num_classes))
            shape = "rect" if rng.random() < 0.5 else "ellipse"
            shading = _gradient_shading(rng, height, width)
            box = paint_object(cube, sigs[cls], top, left, height, width, shape, shading)
            annotations.append(Annotation(class_id=cls, box=box))
            # reserve a 2 px apron so neighboring boxes never touch
            y0 = max(top - 2, 0)
            x0 = max(left - 2, 0)
            occupied[y0 : top + height + 2, x0 : left + width + 2] = True
            break
    return cube.astype(np.float32), annotations


def generate_mask(h, w, density=0.5, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((h, w)) < density).astype(np.float32)


# ------------------------------------------------------------------- dataset


def generate_dataset(out_dir, spec=None, n_train=128, n_val=32, seed=0,
                     mask_density=0.5):
    """Write scenes, annotations, the coded mask and a manifest; returns the
    manifest dict. Fully reproducible from (spec, seed)."""
    spec = spec or SceneSpec()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_train + n_val + 1)
    seeds = [int(c.generate_state(1)[0]) for c in children]

    mask = generate_mask(spec.h, spec.w, density=mask_density, seed=seeds[-1])
    save_cube(out / "mask.funh", mask[:, :, None])

    manifest = {
        "format": 1,
        "spec": asdict(spec),
        "seed": seed,
        "mask": "mask.funh",
        "mask_density": mask_density,
        "train": [],
        "val": [],
    }
    for split, count, offset in (("train", n_train, 0), ("val", n_val, n_train)):
        for i in range(count):
            name = "%s_%03d" % (split, i)
            scene_seed = seeds[offset + i]
            cube, anns = generate_scene(spec, scene_seed)
            save_cube(out / "scenes" / (name + ".funh"), cube)
            save_annotations(out / "scenes" / (name + ".txt"), anns)
            manifest[split].append({"name": name, "seed": scene_seed})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(dataset_dir):
    path = Path(dataset_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != 1:
        raise ContractError("%s: unsupported manifest format" % path)
    return manifest


def spec_from_manifest(manifest):
    fields = dict(manifest["spec"])
    for key in ("objects", "size_range", "large_size_range"):
        fields[key] = tuple(fields[key])
    return SceneSpec(**fields)


def load_scene(dataset_dir, name):
    base = Path(dataset_dir) / "scenes" / name
    return load_cube(str(base) + ".funh"), load_annotations(str(base) + ".txt")


def load_mask(dataset_dir, manifest):
    return load_cube(Path(dataset_dir) / manifest["mask"])[:, :, 0]
