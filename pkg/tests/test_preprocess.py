import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfwatch.imagecore import linearize, save_image
from surfwatch.preprocess import (
    AugmentationParams,
    DatasetError,
    DatasetManifest,
    RegionSpec,
    assemble_regions,
    augment_exposure,
    augment_white_balance,
    build_dataset,
    kelvin_to_rgb,
    partition_regions,
    read_exclusions,
    resize_region,
    white_balance_gains,
)
from tests.oracles import planckian_locus_rgb


def test_partition_camera_frame_into_six():
    frame = np.zeros((2748, 3840, 3), dtype=np.float32)
    tiles = partition_regions(frame, RegionSpec(3, 2))
    assert len(tiles) == 6
    assert all(t.shape == (1374, 1280, 3) for t in tiles)


def test_partition_identity_and_reassembly(rng):
    img = rng.random((50, 61, 3))
    assert np.array_equal(partition_regions(img, RegionSpec(1, 1))[0], img)
    spec = RegionSpec(3, 2)
    tiles = partition_regions(img, spec)
    assert np.array_equal(assemble_regions(tiles, spec), img[:50, :60])


def test_partition_grid_too_large():
    with pytest.raises(ValueError):
        partition_regions(np.zeros((2, 2, 3)), RegionSpec(3, 2))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(8, 30), st.integers(8, 30))
@settings(max_examples=40, deadline=None)
def test_partition_disjoint_and_exhaustive(cols, rows, h, w):
    img = np.arange(h * w * 3, dtype=np.float64).reshape(h, w, 3)
    spec = RegionSpec(cols, rows)
    tiles = partition_regions(img, spec)
    values = np.concatenate([t[..., 0].ravel() for t in tiles])
    cropped = img[: (h // rows) * rows, : (w // cols) * cols, 0].ravel()
    assert len(values) == len(set(values)) == cropped.size
    assert set(values) == set(cropped)


def test_resize_region():
    tile = np.random.default_rng(0).random((1374, 1280, 3))
    assert resize_region(tile, 640, 480).shape == (480, 640, 3)
    small = np.random.default_rng(1).random((20, 30, 3))
    assert np.array_equal(resize_region(small, 30, 20), small)
    const = np.full((20, 30, 3), 0.3)
    assert np.allclose(resize_region(const, 77, 13), 0.3)
    with pytest.raises(ValueError):
        resize_region(small, 0, 10)


def test_exposure_identity_and_stop_definition(rng):
    img = rng.random((16, 16, 3))
    assert np.max(np.abs(augment_exposure(img, 0.0) - img)) <= 1e-6
    from surfwatch.imagecore import delinearize

    v = delinearize(np.full((16, 16, 3), 0.2))
    out = augment_exposure(v, 1.0)
    assert np.allclose(linearize(out), 0.4, atol=1e-9)


def test_exposure_monotone_on_mid_gray():
    img = np.full((16, 16, 3), 0.5)
    assert np.all(augment_exposure(img, 1.0) >= img)
    with pytest.raises(ValueError):
        augment_exposure(img, 1.5)


def test_white_balance_identity_and_warm_direction():
    img = np.full((16, 16, 3), 0.5)
    assert np.max(np.abs(augment_white_balance(img, 0.0) - img)) <= 1e-6
    warm = augment_white_balance(img, -1000.0)
    ratio = lambda im: im[..., 0].mean() / im[..., 2].mean()
    assert ratio(warm) > ratio(img)
    with pytest.raises(ValueError):
        augment_white_balance(img, 1200.0)


def test_white_balance_gains_match_planckian_locus_fit():
    # independent route: Kim et al. chromaticity fit -> XYZ -> linear sRGB
    for delta in (-1000.0, 1000.0):
        ref = planckian_locus_rgb(5500.0 + delta) / planckian_locus_rgb(5500.0)
        ref /= ref[1]
        np.testing.assert_allclose(white_balance_gains(delta), ref, rtol=0.02)
    np.testing.assert_allclose(kelvin_to_rgb(4500.0)[1], 1.0)


def test_kelvin_table_range():
    with pytest.raises(ValueError):
        kelvin_to_rgb(900.0)
    with pytest.raises(ValueError):
        white_balance_gains(1000.0, reference=11500.0)


@given(st.floats(-1, 1), st.floats(-1000, 1000))
@settings(max_examples=30, deadline=None)
def test_augmentation_preserves_geometry_and_range(ev, kel):
    img = np.random.default_rng(0).random((16, 24, 3))
    out = augment_white_balance(augment_exposure(img, ev), kel)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augmentation_params_bounds():
    AugmentationParams(1.0, -1000.0)
    with pytest.raises(ValueError):
        AugmentationParams(1.01, 0.0)


def test_region_spec_validation():
    with pytest.raises(ValueError):
        RegionSpec(3, 2, region_index=6)
    assert RegionSpec().n_regions == 6


def _source(tmp_path, n, size=(16, 24)):
    d = tmp_path / "src"
    d.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        save_image(rng.random((*size, 3)), d / f"img_{i:03d}.png")
    return d


def test_build_dataset_originals_policy_counts(tmp_path):
    src = _source(tmp_path, 283)
    m = build_dataset(src, None, RegionSpec(3, 2, target_width=16, target_height=16), 2, 9, seed=5)
    assert len(m.train_items) + len(m.held_out) == 849
    assert len(m.train_items) == 840 and len(m.held_out) == 9
    train_originals = {it["file"] for it in m.train_items if it["aug"] == "orig"}
    assert not train_originals & set(m.held_out)


def test_build_dataset_strict_policy(tmp_path):
    src = _source(tmp_path, 20)
    m = build_dataset(src, None, RegionSpec(1, 1, 0, 16, 16), 2, 4, seed=1, held_out_policy="strict")
    assert len(m.train_items) == 16 * 3
    assert not {it["file"] for it in m.train_items} & set(m.held_out)


def test_build_dataset_exclusions_and_determinism(tmp_path):
    src = _source(tmp_path, 12)
    excl = tmp_path / "excl.txt"
    excl.write_text("# occluded\nimg_003.png\n\nimg_007.png  # overexposed\n", encoding="utf-8")
    assert read_exclusions(excl) == ["img_003.png", "img_007.png"]
    spec = RegionSpec(1, 1, 0, 16, 16)
    a = build_dataset(src, excl, spec, 2, 2, seed=3)
    b = build_dataset(src, excl, spec, 2, 2, seed=3)
    assert a.to_json() == b.to_json()
    assert a.excluded == ["img_003.png", "img_007.png"]
    files = {it["file"] for it in a.train_items}
    assert not files & set(a.excluded)
    assert len(a.train_items) == 10 * 3 - 2
    for it in a.train_items:
        assert abs(it["delta_ev"]) <= 1 and abs(it["delta_kelvin"]) <= 1000
    assert DatasetManifest.from_json(a.to_json()) == a
    assert set(json.loads(a.to_json())) >= {"source_dir", "excluded", "train_items", "held_out", "seed", "spec"}


def test_build_dataset_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DatasetError, match="no usable images"):
        build_dataset(empty, None, RegionSpec(), 2, 0, 0)
    src = _source(tmp_path, 3)
    with pytest.raises(DatasetError):
        build_dataset(src, None, RegionSpec(), 2, 3, 0)


def test_manifest_fingerprint_ignores_location(tmp_path):
    a = build_dataset(_source(tmp_path / "a", 6), None, RegionSpec(1, 1, 0, 16, 16), 1, 1, seed=2)
    b = build_dataset(_source(tmp_path / "b", 6), None, RegionSpec(1, 1, 0, 16, 16), 1, 1, seed=2)
    assert a.source_dir != b.source_dir
    assert a.fingerprint() == b.fingerprint()
    c = build_dataset(_source(tmp_path / "c", 6), None, RegionSpec(1, 1, 0, 16, 16), 1, 1, seed=3)
    assert c.fingerprint() != a.fingerprint()
