import numpy as np
import pytest

from surfwatch.evalkit import (
    CATEGORIES,
    AnomalySpec,
    evaluate_detection,
    evaluation_set,
    inject_anomaly,
    make_panel,
    pixel_scores,
)
from surfwatch.postprocess import PostprocessConfig, detect_pair


@pytest.mark.parametrize("category", CATEGORIES)
def test_injection_is_confined_to_mask(textured, category):
    out, mask = inject_anomaly(textured, AnomalySpec(category, seed=4))
    assert mask.any()
    assert np.array_equal(out[~mask], textured[~mask])
    assert out.min() >= 0 and out.max() <= 1
    assert np.abs(out - textured)[mask].mean() > 0.02


@pytest.mark.parametrize("category", CATEGORIES)
def test_injection_deterministic(textured, category):
    a = inject_anomaly(textured, AnomalySpec(category, seed=9))
    b = inject_anomaly(textured, AnomalySpec(category, seed=9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_zero_intensity_is_noop(textured):
    out, mask = inject_anomaly(textured, AnomalySpec("moss", intensity=0.0))
    assert not mask.any() and np.array_equal(out, textured)


def test_placement_respected_and_checked(textured):
    _, mask = inject_anomaly(textured, AnomalySpec("salt", placement=(10, 12, 20, 18)))
    ys, xs = np.nonzero(mask)
    assert xs.min() >= 10 and xs.max() < 30 and ys.min() >= 12 and ys.max() < 30
    with pytest.raises(ValueError, match="outside"):
        inject_anomaly(textured, AnomalySpec("salt", placement=(50, 50, 20, 20)))


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown"):
        AnomalySpec("graffiti")
    with pytest.raises(ValueError):
        AnomalySpec("moss", intensity=1.5)


def test_evaluation_set_counts(textured):
    items = evaluation_set([textured] * 9, seed=0)
    assert len(items) == 72
    assert sum(it["category"] == "clean" for it in items) == 9
    for c in CATEGORIES:
        assert sum(it["category"] == c for it in items) == 9


def test_pixel_scores_examples():
    a = np.zeros((4, 4), bool)
    assert pixel_scores(a, None)["iou"] == 1.0
    t = a.copy()
    t[0, :2] = True
    s = pixel_scores(a, t)
    assert s["precision"] == 0.0 and s["recall"] == 0.0 and s["iou"] == 0.0
    p = a.copy()
    p[0, :] = True
    s = pixel_scores(p, t)
    assert s["precision"] == 0.5 and s["recall"] == 1.0 and s["iou"] == 0.5


def test_evaluate_detection_with_masks():
    t = np.zeros((5, 5), bool)
    t[1:3, 1:3] = True
    fa = np.zeros((5, 5), bool)
    fa[4, 4] = True
    res = evaluate_detection([t, np.zeros((5, 5), bool), fa], [t, t, None], ["moss", "moss", "clean"])
    assert res.per_class["moss"]["detected"] == 1 and res.per_class["moss"]["iou"] == 0.5
    assert res.false_alarms == 1 and res.n_clean == 1
    assert "false alarms on clean images: 1/1" in res.table()
    with pytest.raises(ValueError):
        evaluate_detection([t], [t, t])


def test_evaluate_reports_and_panel(textured, tmp_path):
    x, truth = inject_anomaly(textured, AnomalySpec("doodle", seed=1))
    rep = detect_pair(x, textured, PostprocessConfig(tau_ms=0.1, tau_ssim=0.5, min_area=4))
    res = evaluate_detection([rep], [truth], ["doodle"])
    row = res.per_image[0]
    assert row["ms_detected"] is not None and row["ms_iou"] is not None
    res.save(tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text().startswith("{")
    panel = make_panel(x, textured, rep, truth)
    assert panel.shape == (64, 8 * 64 + 7 * 2, 3)
