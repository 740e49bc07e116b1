"""Procedural stand-in for the monitored surface: one fixed stone-like base
texture, re-photographed under randomly varying exposure and white balance."""
from __future__ import annotations

import os
from pathlib import Path

import cv2
import numpy as np

from .imagecore import save_image
from .preprocess import MAX_EV, MAX_KELVIN, augment_exposure, augment_white_balance


def value_noise(h: int, w: int, rng: np.random.Generator, octaves=(2, 4, 8, 16), persistence=0.6) -> np.ndarray:
    """Sum of bicubically upsampled random grids, normalised to [0, 1]."""
    out = np.zeros((h, w))
    amp = 1.0
    for cell in sorted(octaves, reverse=True):
        gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
        grid = rng.normal(size=(gh, gw))
        up = cv2.resize(grid, (gw * cell, gh * cell), interpolation=cv2.INTER_CUBIC)
        out += amp * up[cell:cell + h, cell:cell + w]
        amp *= persistence
    out -= out.min()
    return out / max(out.max(), 1e-12)


def base_texture(h: int, w: int, seed: int = 0, contrast: float = 1.0) -> np.ndarray:
    """Weathered grey-beige stone: mottled albedo, darker deposits, fine grain.

    ``contrast`` scales every albedo variation about the mean tone.
    """
    rng = np.random.default_rng(seed)
    albedo = 0.42 + 0.22 * value_noise(h, w, rng, octaves=(3, 6, 12, 24))
    deposits = value_noise(h, w, rng, octaves=(8, 16, 32))
    albedo -= 0.18 * np.clip((deposits - 0.55) / 0.45, 0.0, 1.0)
    grain = value_noise(h, w, rng, octaves=(2, 4)) - 0.5
    albedo += 0.05 * grain
    albedo = albedo.mean() + contrast * (albedo - albedo.mean())
    tint = np.array([1.04, 1.0, 0.9])
    img = albedo[:, :, None] * tint[None, None, :]
    return np.clip(img, 0.0, 1.0)


def jitter(img: np.ndarray, rng: np.random.Generator, max_ev: float = MAX_EV,
           max_kelvin: float = MAX_KELVIN, noise: float = 0.0) -> np.ndarray:
    ev = rng.uniform(-max_ev, max_ev)
    kel = rng.uniform(-max_kelvin, max_kelvin)
    out = augment_white_balance(augment_exposure(img, ev), kel)
    if noise > 0:
        out = np.clip(out + rng.normal(0.0, noise, size=out.shape), 0.0, 1.0)
    return out


def normal_frames(n: int, h: int, w: int, seed: int = 0, texture_seed: int = 0,
                  max_ev: float = MAX_EV, max_kelvin: float = MAX_KELVIN, noise: float = 0.0,
                  contrast: float = 1.0) -> list[np.ndarray]:
    """``n`` captures of the same surface under varying illumination."""
    base = base_texture(h, w, texture_seed, contrast)
    rng = np.random.default_rng(seed)
    return [jitter(base, rng, max_ev, max_kelvin, noise) for _ in range(n)]


def write_frames(frames: list[np.ndarray], out_dir: str | os.PathLike, prefix: str = "frame") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = out / f"{prefix}_{i:04d}.png"
        save_image(frame, p)
        paths.append(p)
    return paths
