"""Desk-scale end-to-end experiment on procedurally generated stone.

Shared by ``scripts/`` and the acceptance tests: one fixed base texture is
captured 265 times under random exposure / white-balance shifts, 256 frames
train a 64x48 model and 9 are held out for reconstruction error and for
anomaly injection.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalkit import CATEGORIES, EvalResult, evaluate_detection, evaluation_set
from .model import NetworkConfig, reconstruct
from .postprocess import PostprocessConfig, detect_pair
from .preprocess import DatasetManifest, RegionSpec, build_dataset, prepare_region
from .synth import normal_frames, write_frames
from .trainer import ModelCheckpoint, TrainConfig, calibrate, train


@dataclass(frozen=True)
class DeskConfig:
    n_train: int = 256
    n_held_out: int = 9
    width: int = 64
    height: int = 48
    frame_seed: int = 1
    texture_seed: int = 0
    contrast: float = 1.5
    # clean frames used only to calibrate the detection thresholds
    n_validation: int = 32
    validation_seed: int = 777
    # anomaly side as a fraction of the short image side
    size_frac: tuple[float, float] = (0.1, 0.2)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        input_width=64, input_height=48, latent_dim=128, base_channels=16, n_down_blocks=3,
        w_adv=0.05, w_con=40.0, w_enc=0.05, generator_norm="none",
    ))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300, batch_size=16, seed=0,
                                                                   lr_schedule="cosine"))
    postprocess: PostprocessConfig = field(default_factory=lambda: PostprocessConfig(
        ssim_window=3, min_area=12, ssim_min_area=32))


def build_desk_dataset(root: str | Path, cfg: DeskConfig = DeskConfig()) -> DatasetManifest:
    """Write the frames under ``root/frames`` and return the manifest."""
    root = Path(root)
    frames = normal_frames(cfg.n_train + cfg.n_held_out, cfg.height, cfg.width,
                           seed=cfg.frame_seed, texture_seed=cfg.texture_seed, contrast=cfg.contrast)
    write_frames(frames, root / "frames")
    val = normal_frames(cfg.n_validation, cfg.height, cfg.width, seed=cfg.validation_seed,
                        texture_seed=cfg.texture_seed, contrast=cfg.contrast)
    write_frames(val, root / "validation")
    spec = RegionSpec(grid_cols=1, grid_rows=1, region_index=0, target_width=cfg.width, target_height=cfg.height)
    manifest = build_dataset(root / "frames", None, spec, n_aug_per_image=0,
                             held_out=cfg.n_held_out, seed=cfg.frame_seed)
    manifest.save(root / "manifest.json")
    return manifest


def validation_images(manifest: DatasetManifest) -> list[np.ndarray]:
    from .imagecore import load_image
    from .preprocess import list_images

    vdir = Path(manifest.source_dir).parent / "validation"
    return [load_image(vdir / name) for name in list_images(vdir)]


def train_desk_model(manifest: DatasetManifest, cfg: DeskConfig = DeskConfig(), progress=None) -> ModelCheckpoint:
    ckpt = train(manifest, 0, cfg.network, cfg.train, progress=progress)
    return calibrate(ckpt, validation_images(manifest), cfg.postprocess)


def held_out_normals(manifest: DatasetManifest) -> tuple[list[np.ndarray], list[str]]:
    from .imagecore import load_image

    spec = manifest.region_spec
    imgs = [prepare_region(load_image(Path(manifest.source_dir) / f), spec, 0) for f in manifest.held_out]
    return imgs, [Path(f).stem for f in manifest.held_out]


def thresholds(ckpt: ModelCheckpoint, cfg: DeskConfig = DeskConfig()) -> PostprocessConfig:
    return dataclasses.replace(cfg.postprocess, tau_ms=ckpt.calibration["tau_ms"],
                               tau_ssim=ckpt.calibration["tau_ssim"])


def evaluate_seed(ckpt: ModelCheckpoint, normals: list[np.ndarray], names: list[str], seed: int,
                  cfg: DeskConfig = DeskConfig(), net=None) -> tuple[EvalResult, list]:
    """Inject every category into every normal with ``seed`` and score detection."""
    net = net or ckpt.build_model()
    pp = thresholds(ckpt, cfg)
    items = evaluation_set(normals, seed=seed, names=names, size_frac=cfg.size_frac)
    reports = [detect_pair(it["image"], reconstruct(net, it["image"]), pp, source=it["name"]) for it in items]
    result = evaluate_detection(reports, [it["truth"] for it in items],
                                labels=[it["category"] for it in items], names=[it["name"] for it in items])
    return result, reports


def summarize(results: list[EvalResult]) -> dict:
    """Across seeds: per-category detection rate, IoU and per-method majority flags."""
    out = {}
    for c in CATEGORIES:
        rows = [r.per_class[c] for r in results]
        out[c] = {
            "all_detected_frac": float(np.mean([r["detected"] == r["n"] for r in rows])),
            "detected_rate": float(np.mean([r["detected"] / r["n"] for r in rows])),
            "iou": float(np.mean([r["iou"] for r in rows])),
            "ms_rate": float(np.mean([r["ms_detected"] / r["n"] for r in rows])),
            "ssim_rate": float(np.mean([r["ssim_detected"] / r["n"] for r in rows])),
        }
    out["false_alarms"] = [r.false_alarms for r in results]
    return out
