import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surfwatch.postprocess import (
    DIFFERENCE,
    SIMILARITY,
    PostprocessConfig,
    RegistrationConfig,
    SimilarityMatrix,
    apply_homography,
    binarize,
    calibrate_thresholds,
    denoise_mask,
    detect_pair,
    lower_median,
    match_colors,
    matrix_subtraction,
    register_images,
    ssim_map,
    union_masks,
)
from surfwatch.synth import base_texture
from tests.oracles import denoise_direct, ms_direct, ssim_map_direct, ssim_window_direct


def shifted(img, tx, ty):
    m = np.float64([[1, 0, tx], [0, 1, ty]])
    return cv2.warpAffine(img, m, (img.shape[1], img.shape[0]), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REFLECT)


def corners(h, w):
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)


# ---------------------------------------------------------------- registration


def test_self_registration_is_identity(textured):
    _, info = register_images(textured, textured.copy(), RegistrationConfig(require_improvement=False))
    c = corners(*textured.shape[:2])
    assert np.abs(apply_homography(info.transform, c) - c).max() <= 0.1


def test_translation_recovered():
    big = base_texture(192, 192, seed=5)
    x_hat = shifted(big, 3, -2)
    out, info = register_images(big, x_hat)
    assert not info.low_confidence
    c = corners(192, 192)
    # reconstruction content moved by (+3, -2); the map back is (-3, +2)
    expected = c + np.array([-3.0, 2.0])
    err = np.linalg.norm(apply_homography(info.transform, c) - expected, axis=1)
    assert err.mean() <= 0.5
    t = np.asarray(info.transform)
    assert abs(t[0, 2] + 3) <= 0.5 and abs(t[1, 2] - 2) <= 0.5
    inner = (slice(10, -10), slice(10, -10))
    assert np.abs(out - big)[inner].mean() < np.abs(x_hat - big)[inner].mean()


def test_featureless_falls_back_to_identity():
    flat = np.full((64, 64, 3), 0.4)
    out, info = register_images(flat, flat.copy())
    assert info.low_confidence and info.method == "identity"
    assert np.array_equal(out, flat)
    assert np.allclose(info.transform, np.eye(3))


def test_registration_disabled(textured):
    out, info = register_images(textured, textured, RegistrationConfig(enabled=False))
    assert info.method == "identity" and np.array_equal(out, textured)


def test_orb_detector_runs():
    big = base_texture(256, 256, seed=5)
    _, info = register_images(big, shifted(big, 2, 1), RegistrationConfig(detector="orb"))
    assert info.n_matches > 0


# ---------------------------------------------------------------- colour matching


def test_match_colors_moments(rng):
    for _ in range(20):
        x = rng.random((20, 30, 3))
        y = rng.random((20, 30, 3)) * rng.uniform(0.2, 1.0) + rng.uniform(0, 0.3)
        out = match_colors(x, y)
        np.testing.assert_allclose(out.mean(axis=(0, 1)), x.mean(axis=(0, 1)), atol=1e-6)
        np.testing.assert_allclose(out.std(axis=(0, 1)), x.std(axis=(0, 1)), atol=1e-6)


def test_match_colors_fixed_point(rng):
    x = rng.random((16, 16, 3))
    np.testing.assert_allclose(match_colors(x, x), x, atol=1e-6)


def test_match_colors_worked_value():
    # reconstruction channel mu=0.4 sd=0.1; input channel mu=0.5 sd=0.2
    y = np.zeros((2, 2, 3))
    y[..., 0] = np.array([[0.3, 0.5], [0.3, 0.5]])
    x = np.zeros((2, 2, 3))
    x[..., 0] = np.array([[0.3, 0.7], [0.3, 0.7]])
    out = match_colors(x, y)
    # direct evaluation: (0.5 - 0.4) / 0.1 * 0.2 + 0.5
    assert out[0, 1, 0] == pytest.approx(0.7)


def test_match_colors_degenerate_channel(rng):
    x = rng.random((16, 16, 3))
    y = rng.random((16, 16, 3))
    y[..., 1] = 0.25
    out = match_colors(x, y)
    assert np.all(np.isfinite(out))
    assert np.allclose(out[..., 1], x[..., 1].mean())


# ---------------------------------------------------------------- matrix subtraction


def test_ms_identical_is_zero(rng):
    x = rng.random((9, 7, 3))
    assert not matrix_subtraction(x, x).values.any()


def test_ms_single_pixel_worked_example(rng):
    x = rng.random((5, 5, 3)) * 0.5
    y = x.copy()
    x[2, 3, 1] += 0.3
    m = matrix_subtraction(x, y).values
    np.testing.assert_allclose(m, ms_direct(x, y), atol=1e-12)
    assert m[2, 3] == pytest.approx(0.3)
    m[2, 3] = 0
    assert np.abs(m).max() < 1e-12


def test_ms_matches_direct(rng):
    for _ in range(10):
        h, w = rng.integers(3, 9, size=2)
        x, y = rng.random((h, w, 3)), rng.random((h, w, 3))
        np.testing.assert_allclose(matrix_subtraction(x, y).values, ms_direct(x, y), atol=1e-12)


def test_lower_median_even_count():
    assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.integers(0, 2))
@settings(max_examples=40, deadline=None)
def test_ms_invariant_to_channel_offsets(c1, c2, ch):
    rng = np.random.default_rng(7)
    x, y = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    base = matrix_subtraction(x, y).values
    x2, y2 = x.copy(), y.copy()
    x2[..., ch] += c1
    y2[..., (ch + 1) % 3] += c2
    np.testing.assert_allclose(matrix_subtraction(x2, y2).values, base, atol=1e-12)
    assert base.min() >= 0


def test_ms_shape_mismatch():
    with pytest.raises(ValueError):
        matrix_subtraction(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ---------------------------------------------------------------- SSIM


def test_ssim_identical_is_one(rng):
    x = rng.random((20, 20, 3))
    m = ssim_map(x, x)
    assert m.kind == SIMILARITY and m.shape == (20, 20)
    np.testing.assert_allclose(m.values, 1.0, atol=1e-12)


def test_ssim_matches_direct_16x16(rng):
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    np.testing.assert_allclose(ssim_map(x, y, PostprocessConfig(ssim_window=8)).values,
                               ssim_map_direct(x, y, 8), atol=1e-6)


def test_ssim_inverted_is_negative(rng):
    x = rng.random((24, 24, 3))
    m = ssim_map(x, 1.0 - x).values
    assert np.all(m < 0)


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        ssim_map(np.zeros((6, 6, 3)), np.zeros((6, 6, 3)), PostprocessConfig(ssim_window=8))


def test_ssim_top_left_anchor(rng):
    x, y = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    m = ssim_map(x, y, PostprocessConfig(ssim_window=4)).values
    assert m[2, 5] == pytest.approx(ssim_window_direct(x.mean(2), y.mean(2), 2, 5, 4))
    assert m[11, 11] == pytest.approx(ssim_window_direct(x.mean(2), y.mean(2), 8, 8, 4))


@given(arrays(np.float64, (10, 11, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (10, 11, 3), elements=st.floats(0, 1)))
@settings(max_examples=30, deadline=None)
def test_ssim_range(x, y):
    v = ssim_map(x, y, PostprocessConfig(ssim_window=5)).values
    assert np.all(v <= 1 + 1e-9) and np.all(v >= -1 - 1e-9)


# ---------------------------------------------------------------- masks


def test_binarize_examples():
    cfg = PostprocessConfig(tau_ms=0.1, tau_ssim=0.5)
    assert not binarize(SimilarityMatrix(np.zeros((4, 4)), DIFFERENCE), cfg).any()
    assert not binarize(SimilarityMatrix(np.ones((4, 4)), SIMILARITY), cfg).any()
    assert not binarize(SimilarityMatrix(np.full((4, 4), 0.1), DIFFERENCE), cfg).any()
    assert not binarize(SimilarityMatrix(np.full((4, 4), 0.5), SIMILARITY), cfg).any()
    assert binarize(SimilarityMatrix(np.full((4, 4), 0.1001), DIFFERENCE), cfg).all()


def test_binarize_requires_thresholds():
    with pytest.raises(ValueError, match="calibrate"):
        binarize(SimilarityMatrix(np.zeros((4, 4)), DIFFERENCE), PostprocessConfig())


def test_denoise_examples():
    cfg = PostprocessConfig(min_area=16)
    m = np.zeros((30, 30), bool)
    m[1, 1:4] = True
    assert not denoise_mask(m, cfg).any()
    m = np.zeros((30, 30), bool)
    m[5:15, 5:15] = True
    assert np.array_equal(denoise_mask(m, cfg), m)
    m = np.zeros((30, 30), bool)
    m[0:2, 0:5] = True      # area 10
    m[20:24, 20:25] = True  # area 20
    out = denoise_mask(m, cfg)
    assert np.array_equal(out, denoise_direct(m, 16))
    assert out.sum() == 20 and out[21, 21]


def test_denoise_connectivity():
    m = np.zeros((6, 6), bool)
    m[1, 1] = m[2, 2] = True
    assert denoise_mask(m, PostprocessConfig(min_area=2, connectivity=8)).sum() == 2
    assert denoise_mask(m, PostprocessConfig(min_area=2, connectivity=4)).sum() == 0


def test_min_area_scaling():
    cfg = PostprocessConfig()
    assert cfg.area_for((480, 640)) == 64
    assert cfg.area_for((960, 1280)) == 256
    assert PostprocessConfig(min_area=5).area_for((48, 64)) == 5


def test_union_examples(rng):
    a = rng.random((8, 8)) > 0.5
    empty = np.zeros_like(a)
    assert np.array_equal(union_masks(empty, a), a)
    assert np.array_equal(union_masks(a, a), a)
    b = np.zeros((8, 8), bool)
    c = np.zeros((8, 8), bool)
    b[:2], c[5:] = True, True
    assert union_masks(b, c).sum() == b.sum() + c.sum()
    with pytest.raises(ValueError):
        union_masks(a, np.zeros((8, 9), bool))


# ---------------------------------------------------------------- pipeline


def test_self_reconstruction_never_alarms(textured):
    cfg = calibrate_thresholds([(textured, textured * 0.98 + 0.01)], PostprocessConfig())
    rep = detect_pair(textured, textured.copy(), cfg)
    assert not rep.anomaly_present


def test_calibration_percentiles(textured, rng):
    noisy = np.clip(textured + rng.normal(0, 0.01, textured.shape), 0, 1)
    cfg = calibrate_thresholds([(textured, noisy)], PostprocessConfig(registration=RegistrationConfig(enabled=False)))
    ms = matrix_subtraction(textured, match_colors(textured, noisy)).values
    assert cfg.tau_ms == pytest.approx(np.percentile(ms, 99.5))
    assert cfg.tau_ssim < 1


def test_detect_pair_flags_blob_and_report_json(textured, tmp_path):
    x = textured.copy()
    x[20:32, 30:44] = [0.95, 0.95, 0.9]
    cfg = PostprocessConfig(tau_ms=0.2, tau_ssim=0.3, min_area=8)
    rep = detect_pair(x, textured, cfg)
    assert rep.anomaly_present
    assert rep.mask[20:32, 30:44].mean() > 0.5
    d = rep.to_dict()
    assert d["anomaly_present"] and d["components"]
    paths = rep.save(tmp_path, "x", dump_intermediates=True)
    for key in ("report", "mask", "ms_heatmap", "ssim_heatmap", "registration"):
        assert paths[key].exists()
    again = detect_pair(x, textured, cfg)
    assert again.to_json() == rep.to_json() and np.array_equal(again.mask, rep.mask)


def test_ssim_min_area_defaults_and_override():
    cfg = PostprocessConfig(min_area=5)
    assert cfg.ssim_area_for((48, 64)) == 5
    assert PostprocessConfig(min_area=5, ssim_min_area=9).ssim_area_for((48, 64)) == 9
    with pytest.raises(ValueError):
        PostprocessConfig(ssim_min_area=-1)
    m = np.zeros((8, 8), bool)
    m[0:2, 0:3] = True
    assert denoise_mask(m, cfg).any()
    assert not denoise_mask(m, cfg, min_area=7).any()


def test_detect_pair_uses_separate_ssim_floor(textured):
    x = textured.copy()
    x[20:32, 30:44] = [0.95, 0.95, 0.9]
    base = PostprocessConfig(tau_ms=0.2, tau_ssim=0.3, min_area=8)
    rep = detect_pair(x, textured, base)
    assert rep.ssim_mask.any()
    big = int(rep.ssim_mask.sum()) + 1
    strict = detect_pair(x, textured, PostprocessConfig(tau_ms=0.2, tau_ssim=0.3, min_area=8, ssim_min_area=big))
    assert not strict.ssim_mask.any()
    assert np.array_equal(strict.ms_mask, rep.ms_mask)
    assert strict.to_dict()["thresholds"]["ssim_min_area"] == big
