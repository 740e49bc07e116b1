"""Turn (input, reconstruction) pairs into anomaly masks.

registration -> colour matching -> {matrix subtraction, windowed SSIM}
-> binarisation -> area denoising -> union.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .imagecore import save_image, save_mask, to_grayscale, to_uint8

DIFFERENCE = "difference"
SIMILARITY = "similarity"

# min_area default is defined at 640x480 and scaled with pixel count
REFERENCE_PIXELS = 640 * 480
REFERENCE_MIN_AREA = 64


@dataclass(frozen=True)
class RegistrationConfig:
    enabled: bool = True
    detector: str = "sift"  # or "orb"
    min_matches: int = 10
    ransac_reproj_tol: float = 2.0
    ratio_test: float = 0.75
    # reject warps that move the mean image corner further than this fraction of the short side
    max_corner_shift: float = 0.1
    # keep a warp only if it lowers the gray-level residual against the input
    require_improvement: bool = True


@dataclass(frozen=True)
class PostprocessConfig:
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    ssim_window: int = 8
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    tau_ms: float | None = None
    tau_ssim: float | None = None
    min_area: int | None = None
    # SSIM blobs are smeared over a window, so the SSIM mask may use its own floor
    ssim_min_area: int | None = None
    connectivity: int = 8
    ms_percentile: float = 99.5
    ssim_percentile: float = 0.5
    gray_weights: tuple[float, float, float] | None = None

    def __post_init__(self):
        if isinstance(self.registration, dict):
            object.__setattr__(self, "registration", RegistrationConfig(**self.registration))
        if self.gray_weights is not None:
            object.__setattr__(self, "gray_weights", tuple(self.gray_weights))
        if self.ssim_window < 3:
            raise ValueError("ssim_window must be >= 3")
        for name in ("tau_ms", "tau_ssim"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
        for name in ("min_area", "ssim_min_area"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    def area_for(self, shape: tuple[int, ...]) -> int:
        if self.min_area is not None:
            return self.min_area
        return max(1, int(round(REFERENCE_MIN_AREA * shape[0] * shape[1] / REFERENCE_PIXELS)))

    def ssim_area_for(self, shape: tuple[int, ...]) -> int:
        if self.ssim_min_area is not None:
            return self.ssim_min_area
        return self.area_for(shape)


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    kind: str

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------- registration


@dataclass
class RegistrationInfo:
    transform: list[list[float]]
    method: str  # homography | similarity | identity
    n_keypoints: tuple[int, int] = (0, 0)
    n_matches: int = 0
    n_inliers: int = 0
    low_confidence: bool = False
    reason: str = ""

    @property
    def inlier_ratio(self) -> float:
        return self.n_inliers / self.n_matches if self.n_matches else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inlier_ratio"] = self.inlier_ratio
        return d


def _stretched_pair(x: np.ndarray, x_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # one shared 0.5-99.5 percentile stretch; stone is low contrast and
    # 8-bit quantisation would otherwise leave few keypoints
    gx, gy = to_grayscale(x), to_grayscale(x_hat)
    lo, hi = np.percentile(gx, [0.5, 99.5])
    if hi - lo < 1e-6:
        return to_uint8(gx), to_uint8(gy)
    return to_uint8((gx - lo) / (hi - lo)), to_uint8((gy - lo) / (hi - lo))


def _features(gray: np.ndarray, detector: str):
    if detector == "sift":
        det = cv2.SIFT_create()
    elif detector == "orb":
        det = cv2.ORB_create(nfeatures=2000, fastThreshold=5, edgeThreshold=15, patchSize=15)
    else:
        raise ValueError(f"unknown detector {detector!r}")
    kps, desc = det.detectAndCompute(gray, None)
    return kps, desc, (cv2.NORM_L2 if detector == "sift" else cv2.NORM_HAMMING)


def _corners(h: int, w: int) -> np.ndarray:
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def apply_homography(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = np.c_[pts, np.ones(len(pts))] @ np.asarray(m).T
    return q[:, :2] / q[:, 2:3]


def warp(img: np.ndarray, m: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    return cv2.warpPerspective(img, np.asarray(m, dtype=np.float64), (w, h),
                               flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def estimate_transform(x: np.ndarray, x_hat: np.ndarray, cfg: RegistrationConfig) -> RegistrationInfo:
    """Estimate the map taking reconstruction pixel coords onto input coords."""
    ident = np.eye(3).tolist()
    g1, g2 = _stretched_pair(x, x_hat)
    k1, d1, norm = _features(g1, cfg.detector)
    k2, d2, _ = _features(g2, cfg.detector)
    info = RegistrationInfo(ident, "identity", (len(k1), len(k2)))
    if d1 is None or d2 is None or len(k1) < 2 or len(k2) < 2:
        info.low_confidence, info.reason = True, "too few keypoints"
        return info
    pairs = cv2.BFMatcher(norm).knnMatch(d2, d1, k=2)
    good = [p[0] for p in pairs if len(p) == 2 and p[0].distance < cfg.ratio_test * p[1].distance]
    info.n_matches = len(good)
    if len(good) < cfg.min_matches:
        info.low_confidence, info.reason = True, f"{len(good)} matches < {cfg.min_matches}"
        return info
    src = np.float32([k2[m.queryIdx].pt for m in good])
    dst = np.float32([k1[m.trainIdx].pt for m in good])
    m, inl = cv2.findHomography(src, dst, cv2.RANSAC, cfg.ransac_reproj_tol)
    method = "homography"
    if m is None or inl is None or int(inl.sum()) < max(4, cfg.min_matches // 2):
        a, inl = cv2.estimateAffinePartial2D(src, dst, method=cv2.RANSAC,
                                             ransacReprojThreshold=cfg.ransac_reproj_tol)
        if a is None:
            info.low_confidence, info.reason = True, "no consistent transform"
            return info
        m = np.vstack([a, [0.0, 0.0, 1.0]])
        method = "similarity"
    info.transform = np.asarray(m, dtype=np.float64).tolist()
    info.method = method
    info.n_inliers = int(inl.sum())
    return info


def register_images(x: np.ndarray, x_hat: np.ndarray, cfg: PostprocessConfig | RegistrationConfig | None = None
                    ) -> tuple[np.ndarray, RegistrationInfo]:
    """Warp the reconstruction onto the input's geometry.

    Registration failures are reported in the returned info (identity
    transform, ``low_confidence=True``) and never raised.
    """
    if isinstance(cfg, PostprocessConfig):
        cfg = cfg.registration
    cfg = cfg or RegistrationConfig()
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if not cfg.enabled:
        return x_hat.copy(), RegistrationInfo(np.eye(3).tolist(), "identity", reason="disabled")
    info = estimate_transform(x, x_hat, cfg)
    if info.method == "identity":
        return x_hat.copy(), info
    m = np.asarray(info.transform)
    h, w = x.shape[:2]
    corners = _corners(h, w)
    shift = np.linalg.norm(apply_homography(m, corners) - corners, axis=1).mean()
    limit = cfg.max_corner_shift * min(h, w)
    if not np.isfinite(shift) or shift > limit:
        return x_hat.copy(), _fallback(info, f"corner shift {shift:.2f}px exceeds {limit:.2f}px")
    out = warp(x_hat, m)
    if cfg.require_improvement:
        gx = to_grayscale(x)
        before = np.abs(gx - to_grayscale(x_hat)).mean()
        after = np.abs(gx - to_grayscale(out)).mean()
        if after >= before:
            return x_hat.copy(), _fallback(info, "warp did not reduce residual")
    return out, info


def _fallback(info: RegistrationInfo, reason: str) -> RegistrationInfo:
    return replace(info, transform=np.eye(3).tolist(), method="identity", low_confidence=True, reason=reason)


# ---------------------------------------------------------------- colour matching


def match_colors(x: np.ndarray, x_hat_reg: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-channel affine map giving the reconstruction the input's mean and std."""
    x = np.asarray(x, dtype=np.float64)
    xr = np.asarray(x_hat_reg, dtype=np.float64)
    mu_x, sd_x = x.mean(axis=(0, 1)), x.std(axis=(0, 1))
    mu_r, sd_r = xr.mean(axis=(0, 1)), xr.std(axis=(0, 1))
    out = np.empty_like(xr)
    for k in range(xr.shape[2]):
        if sd_r[k] <= eps:
            out[:, :, k] = mu_x[k]
        else:
            out[:, :, k] = (xr[:, :, k] - mu_r[k]) / sd_r[k] * sd_x[k] + mu_x[k]
    return out


# ---------------------------------------------------------------- similarity maps


def lower_median(v: np.ndarray) -> float:
    flat = np.sort(np.asarray(v, dtype=np.float64).ravel())
    return float(flat[(flat.size - 1) // 2])


def matrix_subtraction(x: np.ndarray, x_hat_cm: np.ndarray) -> SimilarityMatrix:
    """Sum over channels of |D_k - median(D_k)| with D = x - x_hat."""
    if x.shape != x_hat_cm.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat_cm.shape}")
    d = np.asarray(x, dtype=np.float64) - np.asarray(x_hat_cm, dtype=np.float64)
    out = np.zeros(d.shape[:2])
    for k in range(d.shape[2]):
        out += np.abs(d[:, :, k] - lower_median(d[:, :, k]))
    return SimilarityMatrix(out, DIFFERENCE)


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sum of every w x w window, indexed by its top-left pixel."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    return s[w:, w:] - s[:-w, w:] - s[w:, :-w] + s[:-w, :-w]


def ssim_valid(gx: np.ndarray, gy: np.ndarray, window: int, k1: float = 0.01, k2: float = 0.03,
               data_range: float = 1.0) -> np.ndarray:
    """SSIM of each uniform ``window x window`` patch pair, (H-w+1, W-w+1)."""
    h, w = gx.shape
    if window > h or window > w:
        raise ValueError(f"window {window} larger than image {w}x{h}")
    n = float(window * window)
    # centre to keep the running sums well conditioned
    c = 0.5 * (gx.mean() + gy.mean())
    a, b = gx - c, gy - c
    sa, sb = _window_sums(a, window) / n, _window_sums(b, window) / n
    var_a = _window_sums(a * a, window) / n - sa * sa
    var_b = _window_sums(b * b, window) / n - sb * sb
    cov = _window_sums(a * b, window) / n - sa * sb
    mu_x, mu_y = sa + c, sb + c
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_map(x: np.ndarray, x_hat_cm: np.ndarray, cfg: PostprocessConfig | None = None) -> SimilarityMatrix:
    """Full-size windowed SSIM map on grayscale versions of both images.

    Pixel (i, j) holds the SSIM of the window whose top-left corner is
    (i, j); the last ``window - 1`` rows/columns repeat the nearest valid
    value.
    """
    cfg = cfg or PostprocessConfig()
    if x.shape != x_hat_cm.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat_cm.shape}")
    gx = to_grayscale(x, cfg.gray_weights)
    gy = to_grayscale(x_hat_cm, cfg.gray_weights)
    valid = ssim_valid(gx, gy, cfg.ssim_window, cfg.ssim_k1, cfg.ssim_k2)
    pad = cfg.ssim_window - 1
    return SimilarityMatrix(np.pad(valid, ((0, pad), (0, pad)), mode="edge"), SIMILARITY)


# ---------------------------------------------------------------- masks


def binarize(m: SimilarityMatrix, cfg: PostprocessConfig) -> np.ndarray:
    """Strict comparison: a value equal to the threshold is normal."""
    if m.kind == DIFFERENCE:
        if cfg.tau_ms is None:
            raise ValueError("tau_ms not set; calibrate thresholds first")
        return m.values > cfg.tau_ms
    if m.kind == SIMILARITY:
        if cfg.tau_ssim is None:
            raise ValueError("tau_ssim not set; calibrate thresholds first")
        return m.values < cfg.tau_ssim
    raise ValueError(f"unknown similarity kind {m.kind!r}")


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Label image and stats rows (x, y, w, h, area) per component, background excluded."""
    n, labels, stats, _ = cv2.connectedComponentsWithStats(
        np.asarray(mask, dtype=np.uint8), connectivity=connectivity, ltype=cv2.CV_32S)
    return labels, stats[1:]


def denoise_mask(mask: np.ndarray, cfg: PostprocessConfig, min_area: int | None = None) -> np.ndarray:
    """Drop connected components smaller than ``min_area`` pixels (default: ``cfg``'s)."""
    mask = np.asarray(mask, dtype=bool)
    if min_area is None:
        min_area = cfg.area_for(mask.shape)
    if min_area <= 1 or not mask.any():
        return mask.copy()
    labels, stats = label_components(mask, cfg.connectivity)
    keep = np.zeros(len(stats) + 1, dtype=bool)
    keep[1:] = stats[:, cv2.CC_STAT_AREA] >= min_area
    return keep[labels]


def union_masks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.logical_or(a, b)


def components(mask: np.ndarray, connectivity: int = 8) -> list[dict]:
    _, stats = label_components(mask, connectivity)
    return [
        {"area": int(s[cv2.CC_STAT_AREA]),
         "bbox": [int(s[cv2.CC_STAT_LEFT]), int(s[cv2.CC_STAT_TOP]),
                  int(s[cv2.CC_STAT_WIDTH]), int(s[cv2.CC_STAT_HEIGHT])]}
        for s in stats
    ]


# ---------------------------------------------------------------- pipeline


def align(x: np.ndarray, x_hat: np.ndarray, cfg: PostprocessConfig) -> tuple[np.ndarray, RegistrationInfo]:
    """Registration followed by colour matching."""
    x_reg, info = register_images(x, x_hat, cfg.registration)
    return match_colors(x, x_reg), info


def similarity_maps(x: np.ndarray, x_hat_cm: np.ndarray, cfg: PostprocessConfig
                    ) -> tuple[SimilarityMatrix, SimilarityMatrix]:
    return matrix_subtraction(x, x_hat_cm), ssim_map(x, x_hat_cm, cfg)


def calibrate_thresholds(pairs: list[tuple[np.ndarray, np.ndarray]], cfg: PostprocessConfig) -> PostprocessConfig:
    """Set tau_ms / tau_ssim from clean (input, raw reconstruction) pairs.

    tau_ms is the ``ms_percentile`` of pooled MS values and tau_ssim the
    ``ssim_percentile`` of pooled SSIM values after alignment.
    """
    if not pairs:
        raise ValueError("need at least one clean image to calibrate")
    ms_vals, ssim_vals = [], []
    for x, x_hat in pairs:
        x_cm, _ = align(x, x_hat, cfg)
        ms, ss = similarity_maps(x, x_cm, cfg)
        ms_vals.append(ms.values.ravel())
        ssim_vals.append(ss.values.ravel())
    tau_ms = float(np.percentile(np.concatenate(ms_vals), cfg.ms_percentile))
    tau_ssim = float(np.percentile(np.concatenate(ssim_vals), cfg.ssim_percentile))
    return replace(cfg, tau_ms=tau_ms, tau_ssim=tau_ssim)


@dataclass
class DetectionReport:
    mask: np.ndarray
    ms_mask: np.ndarray
    ssim_mask: np.ndarray
    ms_map: SimilarityMatrix
    ssim_map: SimilarityMatrix
    registration: RegistrationInfo
    tau_ms: float
    tau_ssim: float
    min_area: int
    ssim_min_area: int | None = None
    connectivity: int = 8
    source: str = ""
    region_index: int | None = None

    @property
    def anomaly_present(self) -> bool:
        return bool(self.mask.any())

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "region_index": self.region_index,
            "anomaly_present": self.anomaly_present,
            "anomaly_pixels": int(self.mask.sum()),
            "ms_pixels": int(self.ms_mask.sum()),
            "ssim_pixels": int(self.ssim_mask.sum()),
            "thresholds": {"tau_ms": self.tau_ms, "tau_ssim": self.tau_ssim,
                           "min_area": self.min_area, "connectivity": self.connectivity,
                           "ssim_min_area": self.min_area if self.ssim_min_area is None else self.ssim_min_area},
            "registration": self.registration.to_dict(),
            "components": components(self.mask, self.connectivity),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, out_dir: str | os.PathLike, stem: str, dump_intermediates: bool = False) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / f"{stem}.json", "mask": out / f"{stem}_mask.png"}
        paths["report"].write_text(self.to_json() + "\n", encoding="utf-8")
        save_mask(self.mask, paths["mask"])
        if dump_intermediates:
            paths["ms_mask"] = out / f"{stem}_ms_mask.png"
            paths["ssim_mask"] = out / f"{stem}_ssim_mask.png"
            paths["ms_heatmap"] = out / f"{stem}_ms_heatmap.png"
            paths["ssim_heatmap"] = out / f"{stem}_ssim_heatmap.png"
            paths["registration"] = out / f"{stem}_registration.json"
            save_mask(self.ms_mask, paths["ms_mask"])
            save_mask(self.ssim_mask, paths["ssim_mask"])
            save_image(heatmap(self.ms_map), paths["ms_heatmap"])
            save_image(heatmap(self.ssim_map), paths["ssim_heatmap"])
            paths["registration"].write_text(json.dumps(self.registration.to_dict(), indent=2) + "\n")
        return paths


def heatmap(m: SimilarityMatrix) -> np.ndarray:
    """Colour-mapped RGB rendering; hotter = more different for both kinds."""
    v = m.values
    if m.kind == SIMILARITY:
        v = (1.0 - np.clip(v, -1.0, 1.0)) / 2.0
    else:
        v = v / max(float(v.max()), 1e-12)
    bgr = cv2.applyColorMap(to_uint8(np.repeat(v[:, :, None], 3, axis=2))[:, :, 0], cv2.COLORMAP_INFERNO)
    return bgr[:, :, ::-1].astype(np.float64) / 255.0


def detect_pair(x: np.ndarray, x_hat: np.ndarray, cfg: PostprocessConfig, source: str = "",
                region_index: int | None = None) -> DetectionReport:
    """Post-process an (input, raw reconstruction) pair into a report."""
    x_cm, info = align(x, x_hat, cfg)
    ms, ss = similarity_maps(x, x_cm, cfg)
    ms_mask = denoise_mask(binarize(ms, cfg), cfg)
    ssim_mask = denoise_mask(binarize(ss, cfg), cfg, cfg.ssim_area_for(x.shape))
    return DetectionReport(
        mask=union_masks(ms_mask, ssim_mask), ms_mask=ms_mask, ssim_mask=ssim_mask,
        ms_map=ms, ssim_map=ss, registration=info,
        tau_ms=float(cfg.tau_ms), tau_ssim=float(cfg.tau_ssim),
        min_area=cfg.area_for(x.shape), ssim_min_area=cfg.ssim_area_for(x.shape),
        connectivity=cfg.connectivity, source=source, region_index=region_index,
    )


def detect(x: np.ndarray, model, cfg: PostprocessConfig, source: str = "") -> DetectionReport:
    """Reconstruct ``x`` with ``model`` (checkpoint or network) and post-process.

    Thresholds missing from ``cfg`` are taken from the checkpoint's stored
    calibration when available.
    """
    from .model import GANomaly, reconstruct
    from .trainer import ModelCheckpoint

    region = None
    if isinstance(model, ModelCheckpoint):
        region = model.region_index
        if (cfg.tau_ms is None or cfg.tau_ssim is None) and model.calibration:
            cal = model.calibration
            cfg = replace(cfg,
                          tau_ms=cfg.tau_ms if cfg.tau_ms is not None else cal["tau_ms"],
                          tau_ssim=cfg.tau_ssim if cfg.tau_ssim is not None else cal["tau_ssim"])
        net = model.build_model()
    elif isinstance(model, GANomaly):
        net = model
    else:
        raise TypeError(f"expected ModelCheckpoint or GANomaly, got {type(model).__name__}")
    x_hat = reconstruct(net, x)
    return detect_pair(x, x_hat, cfg, source=source, region_index=region)
