"""Image and mask value types, PNG I/O and colour-space helpers.

Images are ``float64`` arrays of shape ``(H, W, 3)`` in RGB order with values
in ``[0, 1]``.  Gray images are ``(H, W)`` and masks are ``bool`` ``(H, W)``.
"""
from __future__ import annotations

import os
from pathlib import Path

import cv2
import numpy as np

MIN_SIDE = 16


class ImageLoadError(IOError):
    pass


class ImageSaveError(IOError):
    pass


def check_image(img: np.ndarray, min_side: int = MIN_SIDE) -> np.ndarray:
    """Validate an RGB image array for pipeline entry and return it as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    if img.shape[0] < min_side or img.shape[1] < min_side:
        raise ValueError(f"image {img.shape[1]}x{img.shape[0]} smaller than {min_side}x{min_side}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8- or 16-bit RGB raster into a float image in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise ImageLoadError(f"{path}: no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageLoadError(f"{path}: cannot decode image data")
    channels = 1 if raw.ndim == 2 else raw.shape[2]
    if channels != 3:
        raise ImageLoadError(f"{path}: expected 3 channels, found {channels}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageLoadError(f"{path}: unsupported sample type {raw.dtype}")
    return raw[:, :, ::-1].astype(np.float64) / scale


def to_uint8(img: np.ndarray) -> np.ndarray:
    # round half to even (numpy rint): 0.5 -> 127.5 -> 128
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write as 8-bit RGB PNG (or any format cv2 infers from the suffix).

    Values are clipped to [0, 1] and rounded to the nearest 8-bit level, so a
    load after save is within 1/510 of the original sample.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    path = Path(path)
    try:
        ok = cv2.imwrite(str(path), to_uint8(img)[:, :, ::-1].copy())
    except cv2.error as exc:
        raise ImageSaveError(f"{path}: {exc}") from exc
    if not ok:
        raise ImageSaveError(f"{path}: write failed")


def save_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Write a boolean mask as a single-channel PNG, 0 = normal, 255 = anomaly."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    path = Path(path)
    if not cv2.imwrite(str(path), mask.astype(np.uint8) * 255):
        raise ImageSaveError(f"{path}: write failed")


def load_mask(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageLoadError(f"{path}: cannot decode mask")
    if raw.ndim != 2:
        raise ImageLoadError(f"{path}: mask must be single-channel")
    return raw > 127


def to_grayscale(img: np.ndarray, weights: tuple[float, float, float] | None = None) -> np.ndarray:
    """Collapse RGB to one plane.

    The default is the unweighted channel mean; pass ``weights`` (summing to
    one) for a luma-style combination.
    """
    img = np.asarray(img, dtype=np.float64)
    if weights is None:
        return img.mean(axis=2)
    w = np.asarray(weights, dtype=np.float64)
    return img @ w


def linearize(img: np.ndarray) -> np.ndarray:
    """sRGB-encoded values to linear light."""
    v = np.asarray(img, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((np.maximum(v, 0.04045) + 0.055) / 1.055) ** 2.4)


def delinearize(img: np.ndarray) -> np.ndarray:
    """Linear light to sRGB encoding."""
    v = np.asarray(img, dtype=np.float64)
    return np.where(
        v <= 0.0031308, v * 12.92, 1.055 * np.maximum(v, 0.0031308) ** (1.0 / 2.4) - 0.055
    )
