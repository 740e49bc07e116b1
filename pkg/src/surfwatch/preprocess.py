"""Training-set construction: frame exclusion, region tiling, resizing and
photometric (exposure / white balance) augmentation."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .imagecore import check_image, delinearize, linearize

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

MAX_EV = 1.0
MAX_KELVIN = 1000.0
REFERENCE_KELVIN = 5500.0
KELVIN_TABLE_RANGE = (1000.0, 12000.0)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    grid_cols: int = 3
    grid_rows: int = 2
    region_index: int | None = None  # None: manifest covers every region
    target_width: int = 640
    target_height: int = 480

    def __post_init__(self):
        if self.grid_cols < 1 or self.grid_rows < 1:
            raise ValueError("grid dimensions must be positive")
        if self.region_index is not None and not 0 <= self.region_index < self.n_regions:
            raise ValueError(f"region_index {self.region_index} outside 0..{self.n_regions - 1}")
        if self.target_width <= 0 or self.target_height <= 0:
            raise ValueError("target dimensions must be positive")

    @property
    def n_regions(self) -> int:
        return self.grid_cols * self.grid_rows


@dataclass(frozen=True)
class AugmentationParams:
    delta_ev: float = 0.0
    delta_kelvin: float = 0.0
    seed: int = 0
    max_ev: float = MAX_EV
    max_kelvin: float = MAX_KELVIN

    def __post_init__(self):
        if abs(self.delta_ev) > self.max_ev:
            raise ValueError(f"|delta_ev| = {abs(self.delta_ev)} exceeds {self.max_ev}")
        if abs(self.delta_kelvin) > self.max_kelvin:
            raise ValueError(f"|delta_kelvin| = {abs(self.delta_kelvin)} exceeds {self.max_kelvin}")


# ---------------------------------------------------------------- geometry


def partition_regions(img: np.ndarray, spec: RegionSpec) -> list[np.ndarray]:
    """Split into ``grid_rows x grid_cols`` equal tiles, row-major.

    Rows/columns that do not divide evenly are cropped from the bottom/right.
    """
    h, w = img.shape[:2]
    if spec.grid_rows > h or spec.grid_cols > w:
        raise ValueError(f"grid {spec.grid_cols}x{spec.grid_rows} larger than image {w}x{h}")
    th, tw = h // spec.grid_rows, w // spec.grid_cols
    return [
        img[r * th:(r + 1) * th, c * tw:(c + 1) * tw].copy()
        for r in range(spec.grid_rows)
        for c in range(spec.grid_cols)
    ]


def assemble_regions(tiles: list[np.ndarray], spec: RegionSpec) -> np.ndarray:
    rows = [
        np.concatenate(tiles[r * spec.grid_cols:(r + 1) * spec.grid_cols], axis=1)
        for r in range(spec.grid_rows)
    ]
    return np.concatenate(rows, axis=0)


def region_box(shape: tuple[int, ...], spec: RegionSpec, index: int) -> tuple[int, int, int, int]:
    """(x, y, w, h) of tile ``index`` in a frame of the given shape."""
    th, tw = shape[0] // spec.grid_rows, shape[1] // spec.grid_cols
    r, c = divmod(index, spec.grid_cols)
    return c * tw, r * th, tw, th


def resize_region(tile: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resize to exactly ``w x h``."""
    if w <= 0 or h <= 0:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    if tile.shape[1] == w and tile.shape[0] == h:
        return tile.copy()
    out = cv2.resize(tile.astype(np.float64), (w, h), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- photometry


def augment_exposure(img: np.ndarray, delta_ev: float, max_ev: float = MAX_EV) -> np.ndarray:
    """Shift exposure by ``delta_ev`` stops in linear light."""
    if abs(delta_ev) > max_ev:
        raise ValueError(f"|delta_ev| = {abs(delta_ev)} exceeds {max_ev}")
    if delta_ev == 0:
        return np.asarray(img, dtype=np.float64).copy()
    lin = linearize(img) * 2.0 ** delta_ev
    return np.clip(delinearize(np.clip(lin, 0.0, 1.0)), 0.0, 1.0)


# Multi-lobe piecewise-Gaussian fit of the CIE 1931 2-degree observer
# (Wyman, Sloan & Shirley 2013).
def _g(x, mu, s1, s2):
    s = np.where(x < mu, s1, s2)
    return np.exp(-0.5 * ((x - mu) / s) ** 2)


def _cie1931(lam):
    x = 1.056 * _g(lam, 599.8, 37.9, 31.0) + 0.362 * _g(lam, 442.0, 16.0, 26.7) - 0.065 * _g(lam, 501.1, 20.4, 26.2)
    y = 0.821 * _g(lam, 568.8, 46.9, 40.5) + 0.286 * _g(lam, 530.9, 16.3, 31.1)
    z = 1.217 * _g(lam, 437.0, 11.8, 36.0) + 0.681 * _g(lam, 459.0, 26.0, 13.8)
    return np.stack([x, y, z])


XYZ_TO_LINEAR_SRGB = np.array([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
])


def _blackbody_rgb(kelvin: np.ndarray) -> np.ndarray:
    lam = np.arange(380.0, 781.0, 1.0)
    lam_m = lam[None, :] * 1e-9
    h, c, k = 6.62607015e-34, 2.99792458e8, 1.380649e-23
    radiance = 1.0 / (lam_m ** 5 * np.expm1(h * c / (lam_m * k * kelvin[:, None])))
    xyz = radiance @ _cie1931(lam).T
    rgb = xyz @ XYZ_TO_LINEAR_SRGB.T
    return rgb / rgb[:, 1:2]


KELVIN_TABLE = np.arange(KELVIN_TABLE_RANGE[0], KELVIN_TABLE_RANGE[1] + 1.0, 100.0)
RGB_TABLE = _blackbody_rgb(KELVIN_TABLE)


def kelvin_to_rgb(kelvin: float) -> np.ndarray:
    """Linear-sRGB colour of a blackbody at ``kelvin``, normalised to G = 1."""
    lo, hi = KELVIN_TABLE_RANGE
    if not lo <= kelvin <= hi:
        raise ValueError(f"colour temperature {kelvin} K outside table range [{lo:.0f}, {hi:.0f}]")
    return np.array([np.interp(kelvin, KELVIN_TABLE, RGB_TABLE[:, ch]) for ch in range(3)])


def white_balance_gains(delta_kelvin: float, reference: float = REFERENCE_KELVIN) -> np.ndarray:
    gains = kelvin_to_rgb(reference + delta_kelvin) / kelvin_to_rgb(reference)
    return np.maximum(gains / gains[1], 0.0)


def augment_white_balance(
    img: np.ndarray,
    delta_kelvin: float,
    max_kelvin: float = MAX_KELVIN,
    reference: float = REFERENCE_KELVIN,
) -> np.ndarray:
    """Re-light as if the illuminant moved by ``delta_kelvin`` (negative = warmer)."""
    if abs(delta_kelvin) > max_kelvin:
        raise ValueError(f"|delta_kelvin| = {abs(delta_kelvin)} exceeds {max_kelvin}")
    gains = white_balance_gains(delta_kelvin, reference)
    if delta_kelvin == 0:
        return np.asarray(img, dtype=np.float64).copy()
    lin = linearize(img) * gains
    return np.clip(delinearize(np.clip(lin, 0.0, 1.0)), 0.0, 1.0)


def augment(img: np.ndarray, params: AugmentationParams) -> np.ndarray:
    out = augment_exposure(img, params.delta_ev, params.max_ev)
    return augment_white_balance(out, params.delta_kelvin, params.max_kelvin)


# ---------------------------------------------------------------- dataset


def read_exclusions(path: str | os.PathLike | None) -> list[str]:
    """One file name per line; blank lines and ``#`` comments ignored."""
    if path is None:
        return []
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def list_images(source_dir: str | os.PathLike) -> list[str]:
    return sorted(
        p.name for p in Path(source_dir).iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


@dataclass
class DatasetManifest:
    source_dir: str
    excluded: list[str]
    train_items: list[dict]
    held_out: list[str]
    seed: int
    spec: dict
    n_aug_per_image: int = 2
    held_out_policy: str = "originals"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @property
    def region_spec(self) -> RegionSpec:
        return RegionSpec(**self.spec)

    def fingerprint(self) -> str:
        """Content hash; independent of where the source frames live."""
        d = asdict(self)
        d.pop("source_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def items_for_region(self, region: int) -> list[dict]:
        return [it for it in self.train_items if it["region_index"] in (None, region)]


def build_dataset(
    source_dir: str | os.PathLike,
    exclusions: str | os.PathLike | None,
    spec: RegionSpec,
    n_aug_per_image: int = 2,
    held_out: int = 9,
    seed: int = 0,
    max_ev: float = MAX_EV,
    max_kelvin: float = MAX_KELVIN,
    held_out_policy: str = "originals",
) -> DatasetManifest:
    """Build a deterministic training manifest from a directory of frames.

    Every usable frame yields its original plus ``n_aug_per_image`` variants,
    each with one random exposure shift and one random kelvin shift.
    ``held_out`` originals are reserved for evaluation.  With
    ``held_out_policy="originals"`` only those originals leave the training pool
    (283 frames, 2 variants, 9 held out -> 840 items); with ``"strict"`` the
    held-out frames contribute nothing to training.
    """
    if held_out_policy not in ("originals", "strict"):
        raise ValueError(f"unknown held_out_policy {held_out_policy!r}")
    if n_aug_per_image < 0 or held_out < 0:
        raise ValueError("counts must be non-negative")
    excluded_names = set(read_exclusions(exclusions))
    names = list_images(source_dir)
    excluded = [n for n in names if n in excluded_names]
    usable = [n for n in names if n not in excluded_names]
    if not usable:
        raise DatasetError(f"{source_dir}: no usable images")
    if len(usable) < held_out + 1:
        raise DatasetError(f"{source_dir}: {len(usable)} usable images, need at least {held_out + 1}")

    rng = np.random.default_rng(seed)
    held = sorted(rng.choice(usable, size=held_out, replace=False).tolist()) if held_out else []
    held_set = set(held)
    items = []
    for name in usable:
        # draw for every frame so the stream does not depend on the hold-out choice
        evs = rng.uniform(-max_ev, max_ev, size=n_aug_per_image)
        kels = rng.uniform(-max_kelvin, max_kelvin, size=n_aug_per_image)
        if name in held_set and held_out_policy == "strict":
            continue
        if name not in held_set:
            items.append({"file": name, "region_index": spec.region_index, "aug": "orig",
                          "delta_ev": 0.0, "delta_kelvin": 0.0})
        for k in range(n_aug_per_image):
            items.append({"file": name, "region_index": spec.region_index, "aug": f"aug{k + 1}",
                          "delta_ev": round(float(evs[k]), 6), "delta_kelvin": round(float(kels[k]), 3)})
    return DatasetManifest(
        source_dir=str(source_dir),
        excluded=excluded,
        train_items=items,
        held_out=held,
        seed=seed,
        spec=asdict(spec),
        n_aug_per_image=n_aug_per_image,
        held_out_policy=held_out_policy,
    )


def prepare_region(img: np.ndarray, spec: RegionSpec, region: int) -> np.ndarray:
    """Frame -> resized tile for one region model.

    Frames already at the target tile size are passed through untouched so
    single-region crops can be fed directly.
    """
    if img.shape[:2] == (spec.target_height, spec.target_width):
        return check_image(img)
    tile = partition_regions(img, spec)[region]
    return resize_region(tile, spec.target_width, spec.target_height)


def materialize_item(manifest: DatasetManifest, item: dict, region: int, cache: dict | None = None) -> np.ndarray:
    """Load, tile, resize and augment one manifest entry."""
    from .imagecore import load_image

    key = (item["file"], region)
    if cache is not None and key in cache:
        base = cache[key]
    else:
        base = prepare_region(load_image(Path(manifest.source_dir) / item["file"]), manifest.region_spec, region)
        if cache is not None:
            cache[key] = base
    if item["delta_ev"] == 0 and item["delta_kelvin"] == 0:
        return base.copy()
    return augment_white_balance(augment_exposure(base, item["delta_ev"]), item["delta_kelvin"])
