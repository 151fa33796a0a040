"""Scene synthesis, signatures, the FUNH container and dataset layout."""

import struct

import numpy as np
import pytest

from funhsi.data import (
    SceneSpec,
    class_signatures,
    generate_dataset,
    generate_mask,
    generate_scene,
    load_annotations,
    load_cube,
    load_manifest,
    load_mask,
    load_scene,
    paint_object,
    save_annotations,
    save_cube,
    spec_from_manifest,
    _lowfreq,
)
from funhsi.detection import Annotation
from funhsi.tensor import ContractError, ShapeError

SMALL = SceneSpec(h=32, w=32, bands=6, num_classes=3, objects=(2, 4), size_range=(9, 14))


# --------------------------------------------------------------- container


def test_container_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        x = rng.random((7, 9, 3)).astype(dtype)
        p = tmp_path / ("cube_%s.funh" % np.dtype(dtype).name)
        save_cube(p, x)
        y = load_cube(p)
        assert y.dtype == dtype
        assert np.array_equal(x, y)


def test_container_header_layout(tmp_path):
    x = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    p = tmp_path / "c.funh"
    save_cube(p, x)
    blob = p.read_bytes()
    assert blob[:4] == b"FUNH"
    version, h, w, n, code = struct.unpack_from("<5I", blob, 4)
    assert (version, h, w, n, code) == (1, 2, 3, 2, 0)
    # band-sequential little-endian payload: band 0 plane first
    payload = np.frombuffer(blob, dtype="<f4", offset=24)
    assert np.array_equal(payload[:6], x[:, :, 0].ravel())
    assert np.array_equal(payload[6:], x[:, :, 1].ravel())


def test_container_rejects_garbage(tmp_path):
    p = tmp_path / "bad.funh"
    p.write_bytes(b"NOPE" + b"\0" * 24)
    with pytest.raises(ContractError):
        load_cube(p)
    x = np.zeros((2, 2, 2), dtype=np.float32)
    save_cube(p, x)
    blob = bytearray(p.read_bytes())
    p.write_bytes(bytes(blob[:-4]))  # truncated payload
    with pytest.raises(ContractError):
        load_cube(p)
    blob2 = bytearray(blob)
    struct.pack_into("<I", blob2, 4, 9)  # unknown version
    p.write_bytes(bytes(blob2))
    with pytest.raises(ContractError):
        load_cube(p)
    blob3 = bytearray(blob)
    struct.pack_into("<I", blob3, 20, 7)  # unknown dtype code
    p.write_bytes(bytes(blob3))
    with pytest.raises(ContractError):
        load_cube(p)


def test_save_cube_contracts(tmp_path):
    with pytest.raises(ShapeError):
        save_cube(tmp_path / "x.funh", np.zeros((4, 4)))
    with pytest.raises(ContractError):
        save_cube(tmp_path / "x.funh", np.zeros((4, 4, 2), dtype=np.int32))


def test_annotation_file_roundtrip(tmp_path):
    anns = [
        Annotation(class_id=0, box=(4.0, 4.0, 12.0, 12.0)),
        Annotation(class_id=3, box=(1.5, 2.0, 9.5, 30.0)),
    ]
    p = tmp_path / "scene.txt"
    save_annotations(p, anns)
    assert load_annotations(p) == anns
    save_annotations(p, [])
    assert load_annotations(p) == []


# --------------------------------------------------------------- signatures


def test_signatures_separable_and_deterministic():
    for spec in (SceneSpec(), SMALL):
        sigs = class_signatures(spec)
        assert sigs.shape == (spec.num_classes + 1, spec.bands)
        assert sigs.min() >= 0.0 and sigs.max() <= 1.0
        assert np.allclose(sigs.max(axis=1), 1.0)
        for i in range(len(sigs)):
            for j in range(i):
                assert np.corrcoef(sigs[i], sigs[j])[0, 1] < 0.95
    a = class_signatures(SceneSpec(seed=5))
    b = class_signatures(SceneSpec(seed=5))
    c = class_signatures(SceneSpec(seed=6))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ------------------------------------------------------------------- scenes


def test_paint_rectangle_tight_box():
    cube = np.zeros((64, 64, 8))
    sig = np.linspace(0.2, 1.0, 8)
    box = paint_object(cube, sig, top=4, left=4, height=8, width=8, shape="rect")
    assert box == (4.0, 4.0, 12.0, 12.0)
    assert np.allclose(cube[4:12, 4:12], sig)  # flat shading paints the raw signature
    assert cube[3, 4].sum() == 0.0 and cube[4, 12].sum() == 0.0


def test_paint_ellipse_tight_box_and_purity():
    for height, width in ((9, 9), (9, 20), (15, 11)):
        cube = np.zeros((40, 40, 4))
        sig = np.ones(4)
        box = paint_object(cube, sig, top=3, left=5, height=height, width=width,
                           shape="ellipse")
        assert box == (5.0, 3.0, 5.0 + width, 3.0 + height)
        painted = cube[3 : 3 + height, 5 : 5 + width, 0] > 0
        assert painted.mean() >= 0.70


def test_scene_zero_objects_is_background():
    spec = SceneSpec(h=32, w=32, bands=6, num_classes=3, objects=(0, 0))
    cube, anns = generate_scene(spec, scene_seed=42)
    assert anns == []
    rng = np.random.default_rng(42)
    brightness = 0.2 + 0.3 * _lowfreq(rng, 32, 32)
    bg = (brightness[:, :, None] * class_signatures(spec)[-1]).astype(np.float32)
    assert np.array_equal(cube, bg)


def test_scene_deterministic():
    a_cube, a_anns = generate_scene(SMALL, scene_seed=7)
    b_cube, b_anns = generate_scene(SMALL, scene_seed=7)
    c_cube, _ = generate_scene(SMALL, scene_seed=8)
    assert np.array_equal(a_cube, b_cube)
    assert a_anns == b_anns
    assert not np.array_equal(a_cube, c_cube)


def _classify_pixels(cube, sigs):
    """Nearest signature by correlation, per pixel."""
    flat = cube.reshape(-1, cube.shape[2]).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    s = sigs - sigs.mean(axis=1, keepdims=True)
    num = flat @ s.T
    den = np.linalg.norm(flat, axis=1, keepdims=True) * np.linalg.norm(s, axis=1)
    corr = num / np.maximum(den, 1e-12)
    return corr.argmax(axis=1).reshape(cube.shape[:2])


def test_scene_boxes_pure_and_disjoint():
    sigs = class_signatures(SMALL)
    total = 0
    for seed in range(12):
        cube, anns = generate_scene(SMALL, scene_seed=seed)
        assert cube.min() >= 0.0 and cube.max() <= 1.0
        labels = _classify_pixels(cube, sigs)
        for k, ann in enumerate(anns):
            x0, y0, x1, y1 = (int(v) for v in ann.box)
            assert 0 < x0 < x1 <= SMALL.w and 0 < y0 < y1 <= SMALL.h
            assert min(x1 - x0, y1 - y0) >= SMALL.size_range[0]
            patch = labels[y0:y1, x0:x1]
            purity = np.mean(patch == ann.class_id)
            assert purity >= 0.70, "scene %d ann %d purity %.2f" % (seed, k, purity)
            for other in anns[:k]:  # strictly disjoint boxes
                ox0, oy0, ox1, oy1 = other.box
                ix = min(x1, ox1) - max(x0, ox0)
                iy = min(y1, oy1) - max(y0, oy0)
                assert ix <= 0 or iy <= 0
        total += len(anns)
    assert total >= 12 * SMALL.objects[0]


def test_scene_object_spectra_track_signature():
    sigs = class_signatures(SMALL)
    cube, anns = generate_scene(SMALL, scene_seed=3)
    assert anns, "seed 3 should place objects"
    for ann in anns:
        x0, y0, x1, y1 = (int(v) for v in ann.box)
        sig = sigs[ann.class_id]
        hits = 0
        pix = 0
        for y in range(y0, y1):
            for x in range(x0, x1):
                c = np.corrcoef(cube[y, x].astype(np.float64), sig)[0, 1]
                pix += 1
                hits += c > 0.9
        assert hits / pix >= 0.70


def test_generate_mask():
    m = generate_mask(64, 64, density=0.5, seed=1)
    assert m.dtype == np.float32
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert abs(m.mean() - 0.5) < 0.03
    assert np.array_equal(m, generate_mask(64, 64, density=0.5, seed=1))
    dense = generate_mask(64, 64, density=0.9, seed=1)
    assert dense.mean() > 0.8


# ------------------------------------------------------------------ dataset


def test_generate_dataset_layout_and_determinism(tmp_path):
    spec = SMALL
    m1 = generate_dataset(tmp_path / "a", spec=spec, n_train=3, n_val=2, seed=9)
    m2 = generate_dataset(tmp_path / "b", spec=spec, n_train=3, n_val=2, seed=9)
    names = ["train_000", "train_001", "train_002", "val_000", "val_001"]
    assert [e["name"] for e in m1["train"] + m1["val"]] == names
    for rel in ["manifest.json", "mask.funh"] + [
        "scenes/%s.%s" % (n, ext) for n in names for ext in ("funh", "txt")
    ]:
        fa = (tmp_path / "a" / rel).read_bytes()
        fb = (tmp_path / "b" / rel).read_bytes()
        assert fa == fb, rel
    m3 = generate_dataset(tmp_path / "c", spec=spec, n_train=3, n_val=2, seed=10)
    assert m3["train"][0]["seed"] != m1["train"][0]["seed"]


def test_dataset_loaders(tmp_path):
    generate_dataset(tmp_path, spec=SMALL, n_train=2, n_val=1, seed=4)
    manifest = load_manifest(tmp_path)
    assert spec_from_manifest(manifest) == SMALL
    mask = load_mask(tmp_path, manifest)
    assert mask.shape == (SMALL.h, SMALL.w)
    for entry in manifest["train"] + manifest["val"]:
        cube, anns = load_scene(tmp_path, entry["name"])
        assert cube.shape == (SMALL.h, SMALL.w, SMALL.bands)
        want_cube, want_anns = generate_scene(SMALL, entry["seed"])
        assert np.array_equal(cube, want_cube)
        assert anns == want_anns


def test_scene_spec_validation():
    with pytest.raises(ContractError):
        SceneSpec(size_range=(3, 10))
    with pytest.raises(ContractError):
        SceneSpec(h=16, w=16, size_range=(9, 15))
    with pytest.raises(ContractError):
        SceneSpec(size_range=(12, 9))
