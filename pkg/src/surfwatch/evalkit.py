"""Synthetic anomaly injection and pixel-level detection metrics.

Each renderer paints into a placement rectangle by alpha-blending a target
appearance over the input.  The ground-truth mask is every pixel whose alpha
exceeds 1/255; alpha below that is forced to zero, so no pixel outside the
mask is ever modified.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

CATEGORIES = ("carving", "crack", "moss", "doodle", "salt", "water_stain", "bird_dropping")
ALPHA_FLOOR = 1.0 / 255.0
# default placement box side, as a fraction of the image's short side
SIZE_FRAC = (0.3, 0.45)


@dataclass(frozen=True)
class AnomalySpec:
    category: str
    seed: int = 0
    intensity: float = 1.0
    placement: tuple[int, int, int, int] | None = None  # x, y, w, h
    size_frac: tuple[float, float] = SIZE_FRAC  # used when placement is None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown anomaly category {self.category!r}; expected one of {CATEGORIES}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")
        if self.placement is not None:
            object.__setattr__(self, "placement", tuple(int(v) for v in self.placement))
        object.__setattr__(self, "size_frac", tuple(float(v) for v in self.size_frac))
        if not 0.0 < self.size_frac[0] <= self.size_frac[1] <= 1.0:
            raise ValueError("size_frac must satisfy 0 < lo <= hi <= 1")


def default_placement(shape: tuple[int, ...], rng: np.random.Generator, frac=SIZE_FRAC) -> tuple[int, int, int, int]:
    h, w = shape[:2]
    side = min(h, w)
    rw = int(round(side * rng.uniform(*frac)))
    rh = int(round(side * rng.uniform(*frac)))
    rw, rh = max(rw, 6), max(rh, 6)
    x0 = int(rng.integers(0, w - rw + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    return x0, y0, rw, rh


# ---------------------------------------------------------------- helpers


def _smooth_noise(h: int, w: int, rng: np.random.Generator, cell: int) -> np.ndarray:
    gh, gw = h // cell + 3, w // cell + 3
    up = cv2.resize(rng.random((gh, gw)), (gw * cell, gh * cell), interpolation=cv2.INTER_CUBIC)
    return up[cell:cell + h, cell:cell + w]


def _blob(h: int, w: int, rng: np.random.Generator, wobble: float = 0.25) -> np.ndarray:
    """Signed 'inside' field: > 0 inside an irregular ellipse filling the box."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ang = np.arctan2(yy - cy, xx - cx)
    r = np.hypot((yy - cy) / max(h / 2.0, 1), (xx - cx) / max(w / 2.0, 1))
    phases = rng.uniform(0, 2 * np.pi, 3)
    amps = rng.uniform(0, wobble, 3) / np.arange(1, 4)
    edge = 0.85 + sum(a * np.sin((k + 2) * ang + p) for k, (a, p) in enumerate(zip(amps, phases)))
    return edge - r


def _polyline(rng: np.random.Generator, h: int, w: int, n: int, step: float, turn: float) -> np.ndarray:
    pts = [np.array([rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h])]
    heading = rng.uniform(0, 2 * np.pi)
    for _ in range(n):
        heading += rng.normal(0, turn)
        nxt = pts[-1] + step * np.array([np.cos(heading), np.sin(heading)])
        if not (0 <= nxt[0] <= w - 1 and 0 <= nxt[1] <= h - 1):
            heading += np.pi
            nxt = np.clip(nxt, 0, [w - 1, h - 1])
        pts.append(nxt)
    return np.array(pts)


def _draw(h: int, w: int, paths: list[np.ndarray], thickness: int, scale: int = 4) -> np.ndarray:
    """Anti-aliased stroke coverage in [0, 1], drawn at ``scale``x and area-averaged."""
    canvas = np.zeros((h * scale, w * scale), np.uint8)
    for pts in paths:
        q = np.round((pts + 0.5) * scale - 0.5).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(canvas, [q], False, 255, thickness=max(1, thickness * scale), lineType=cv2.LINE_AA)
    return cv2.resize(canvas.astype(np.float64) / 255.0, (w, h), interpolation=cv2.INTER_AREA)


# ---------------------------------------------------------------- renderers
# each returns (alpha, target) for the placement box


def _carving(patch, rng):
    h, w = patch.shape[:2]
    paths = [_polyline(rng, h, w, 4, max(h, w) / 4.0, 0.6) for _ in range(2)]
    groove = _draw(h, w, paths, thickness=max(1, min(h, w) // 10))
    # raised rim lit from the top-left, shadowed bottom-right
    lit = np.roll(np.roll(groove, -1, 0), -1, 1)
    relief = np.clip(lit - groove, 0, 1)
    shade = np.clip(groove - lit, 0, 1)
    target = patch * (1.0 - 0.6 * groove[..., None])
    target = target + 0.35 * relief[..., None] - 0.15 * shade[..., None]
    alpha = np.clip(groove + relief + shade, 0, 1)
    return alpha, np.clip(target, 0, 1)


def _crack(patch, rng):
    h, w = patch.shape[:2]
    main = _polyline(rng, h, w, 10, max(h, w) / 6.0, 0.5)
    paths = [main]
    if len(main) > 4:
        start = main[int(rng.integers(2, len(main) - 1))]
        branch = _polyline(rng, h, w, 4, max(h, w) / 8.0, 0.7)
        paths.append(branch - branch[0] + start)
    cover = _draw(h, w, [np.clip(p, 0, [w - 1, h - 1]) for p in paths], thickness=1)
    target = patch * 0.25
    return np.clip(cover * 1.4, 0, 1), target


def _moss(patch, rng):
    h, w = patch.shape[:2]
    inside = _blob(h, w, rng, wobble=0.35)
    soft = np.clip(inside / 0.15, 0, 1)
    clumps = _smooth_noise(h, w, rng, cell=max(3, min(h, w) // 4))
    alpha = soft * (0.55 + 0.4 * clumps)
    shade = 0.7 + 0.6 * _smooth_noise(h, w, rng, cell=max(2, min(h, w) // 6))
    green = np.array([0.22, 0.42, 0.14])
    target = green[None, None, :] * shade[..., None]
    return alpha, np.clip(target, 0, 1)


def _doodle(patch, rng):
    h, w = patch.shape[:2]
    t = np.linspace(0, 1, 24)
    paths = []
    for _ in range(2):
        c = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h], size=(4, 2))
        # cubic Bezier through four random control points
        b = ((1 - t) ** 3)[:, None] * c[0] + (3 * (1 - t) ** 2 * t)[:, None] * c[1] \
            + (3 * (1 - t) * t ** 2)[:, None] * c[2] + (t ** 3)[:, None] * c[3]
        paths.append(b)
    cover = _draw(h, w, paths, thickness=max(2, min(h, w) // 8))
    palette = np.array([[0.85, 0.08, 0.1], [0.1, 0.2, 0.85], [0.9, 0.1, 0.75], [0.05, 0.6, 0.9]])
    color = palette[int(rng.integers(len(palette)))]
    return 0.9 * cover, np.broadcast_to(color, patch.shape).copy()


def _salt(patch, rng):
    h, w = patch.shape[:2]
    inside = np.clip(_blob(h, w, rng, wobble=0.3) / 0.2, 0, 1)
    n = max(8, int(0.35 * h * w))
    ys = rng.integers(0, h, n)
    xs = rng.integers(0, w, n)
    dots = np.zeros((h, w))
    np.maximum.at(dots, (ys, xs), rng.uniform(0.7, 1.0, n))
    dots = np.maximum(dots, 0.6 * cv2.GaussianBlur(dots, (3, 3), 0.6))
    alpha = np.clip(dots * inside, 0, 1)
    target = np.full(patch.shape, 0.96) - 0.04 * rng.random(patch.shape[:2])[..., None]
    return alpha, target


def _water_stain(patch, rng):
    h, w = patch.shape[:2]
    inside = _blob(h, w, rng, wobble=0.2)
    alpha = 0.65 * np.clip(inside / 0.35, 0, 1) ** 1.5
    tint = np.array([0.5, 0.45, 0.38])
    return alpha, patch * tint


def _bird_dropping(patch, rng):
    h, w = patch.shape[:2]
    scale = 4
    inside = _blob(h * scale, w * scale, rng, wobble=0.3)
    hard = cv2.resize((inside > 0).astype(np.float64), (w, h), interpolation=cv2.INTER_AREA)
    core = np.clip(_blob(h, w, rng, wobble=0.2) / 0.5, 0, 1)
    base = np.array([0.93, 0.93, 0.89])
    target = base[None, None, :] - 0.12 * core[..., None] * np.array([0.6, 0.6, 1.0])
    return hard, np.clip(target, 0, 1)


RENDERERS = {
    "carving": _carving,
    "crack": _crack,
    "moss": _moss,
    "doodle": _doodle,
    "salt": _salt,
    "water_stain": _water_stain,
    "bird_dropping": _bird_dropping,
}


def inject_anomaly(x: np.ndarray, spec: AnomalySpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (modified image, ground-truth mask)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    rng = np.random.default_rng([spec.seed, CATEGORIES.index(spec.category)])
    if spec.placement is None:
        x0, y0, rw, rh = default_placement(x.shape, rng, spec.size_frac)
    else:
        x0, y0, rw, rh = spec.placement
        if rw <= 0 or rh <= 0 or x0 < 0 or y0 < 0 or x0 + rw > w or y0 + rh > h:
            raise ValueError(f"placement {spec.placement} outside image {w}x{h}")
    patch = x[y0:y0 + rh, x0:x0 + rw]
    alpha, target = RENDERERS[spec.category](patch, rng)
    alpha = np.clip(alpha * spec.intensity, 0.0, 1.0)
    alpha[alpha <= ALPHA_FLOOR] = 0.0
    out = x.copy()
    blended = patch * (1.0 - alpha[..., None]) + target * alpha[..., None]
    out[y0:y0 + rh, x0:x0 + rw] = np.clip(blended, 0.0, 1.0)
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y0 + rh, x0:x0 + rw] = alpha > 0
    return out, mask


def evaluation_set(normals: list[np.ndarray], seed: int = 0, names: list[str] | None = None,
                   size_frac: tuple[float, float] = SIZE_FRAC) -> list[dict]:
    """Clean images plus one injected image per category for each normal."""
    names = names or [f"normal_{i:02d}" for i in range(len(normals))]
    items = []
    for i, (name, x) in enumerate(zip(names, normals)):
        items.append({"name": f"{name}__clean", "category": "clean", "image": x, "truth": None})
        for category in CATEGORIES:
            img, mask = inject_anomaly(x, AnomalySpec(category, seed=seed * 1000 + i, size_frac=size_frac))
            items.append({"name": f"{name}__{category}", "category": category, "image": img, "truth": mask})
    return items


# ---------------------------------------------------------------- metrics


def pixel_scores(pred: np.ndarray, truth: np.ndarray | None) -> dict:
    pred = np.asarray(pred, dtype=bool)
    truth = np.zeros_like(pred) if truth is None else np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        return {"tp": 0, "fp": 0, "fn": 0, "precision": 1.0, "recall": 1.0, "iou": 1.0}
    return {
        "tp": tp, "fp": fp, "fn": fn,
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "iou": tp / (tp + fp + fn),
    }


@dataclass
class EvalResult:
    per_image: list[dict]
    per_class: dict[str, dict]
    false_alarms: int
    n_clean: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def table(self) -> str:
        lines = [f"{'class':<14}{'n':>4}{'detected':>10}{'ms':>6}{'ssim':>6}{'precision':>11}{'recall':>8}{'iou':>7}"]
        for name, agg in self.per_class.items():
            lines.append(
                f"{name:<14}{agg['n']:>4}{agg['detected']:>10}{agg['ms_detected']:>6}{agg['ssim_detected']:>6}"
                f"{agg['precision']:>11.3f}{agg['recall']:>8.3f}{agg['iou']:>7.3f}"
            )
        lines.append(f"false alarms on clean images: {self.false_alarms}/{self.n_clean}")
        return "\n".join(lines)


def _mask_of(report) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    if isinstance(report, np.ndarray):
        return report, None, None
    return report.mask, getattr(report, "ms_mask", None), getattr(report, "ssim_mask", None)


def evaluate_detection(reports: list, truths: list, labels: list[str] | None = None,
                       names: list[str] | None = None) -> EvalResult:
    """Score detection reports (or bare masks) against truth masks.

    ``None`` in ``truths`` marks a clean image; a non-empty prediction on it
    counts as a false alarm.
    """
    if len(reports) != len(truths):
        raise ValueError(f"{len(reports)} reports but {len(truths)} truths")
    labels = labels or ["clean" if t is None else "anomaly" for t in truths]
    names = names or [str(i) for i in range(len(reports))]
    if len(labels) != len(reports) or len(names) != len(reports):
        raise ValueError("labels/names must align with reports")
    per_image = []
    for rep, truth, label, name in zip(reports, truths, labels, names):
        mask, ms, ss = _mask_of(rep)
        row = {"name": name, "category": label, "clean": truth is None,
               "detected": bool(mask.any()), **pixel_scores(mask, truth)}
        row["ms_detected"] = bool(ms.any()) if ms is not None else None
        row["ssim_detected"] = bool(ss.any()) if ss is not None else None
        row["ms_iou"] = pixel_scores(ms, truth)["iou"] if ms is not None else None
        row["ssim_iou"] = pixel_scores(ss, truth)["iou"] if ss is not None else None
        per_image.append(row)
    per_class = {}
    for label in dict.fromkeys(labels):
        rows = [r for r in per_image if r["category"] == label]
        per_class[label] = {
            "n": len(rows),
            "detected": sum(r["detected"] for r in rows),
            "ms_detected": sum(bool(r["ms_detected"]) for r in rows),
            "ssim_detected": sum(bool(r["ssim_detected"]) for r in rows),
            "precision": float(np.mean([r["precision"] for r in rows])),
            "recall": float(np.mean([r["recall"] for r in rows])),
            "iou": float(np.mean([r["iou"] for r in rows])),
        }
    clean = [r for r in per_image if r["clean"]]
    return EvalResult(per_image, per_class, sum(r["detected"] for r in clean), len(clean))


def make_panel(x: np.ndarray, x_hat: np.ndarray, report, truth: np.ndarray | None) -> np.ndarray:
    """Side-by-side strip: input | raw output | MS map | SSIM map | MS mask |
    SSIM mask | final mask | ground truth."""
    from .postprocess import heatmap

    def rgb(mask):
        return np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=2)

    gt = np.zeros(x.shape[:2]) if truth is None else truth
    tiles = [x, np.clip(x_hat, 0, 1), heatmap(report.ms_map), heatmap(report.ssim_map),
             rgb(report.ms_mask), rgb(report.ssim_mask), rgb(report.mask), rgb(gt)]
    sep = np.ones((x.shape[0], 2, 3))
    row = []
    for t in tiles:
        row += [t, sep]
    return np.concatenate(row[:-1], axis=1)
