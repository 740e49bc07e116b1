"""Training loop, reconstruction error metric and checkpoint container."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import (
    GANomaly,
    NetworkConfig,
    loss_adversarial,
    loss_contextual,
    loss_discriminator,
    loss_encoder,
    loss_generator_total,
    reconstruct,
    to_tensor,
)
from .preprocess import DatasetManifest, materialize_item, prepare_region

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"SWCKPT\x00\x01"


class TrainingError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-7
    batch_size: int = 16
    epochs: int = 1200
    seed: int = 0
    betas: tuple[float, float] = (0.5, 0.999)
    eval_every: int = 1
    lr_schedule: str = "constant"  # constant | cosine

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))


def reconstruction_error(y: np.ndarray, y_tilde: np.ndarray) -> float:
    """Relative L2 error in percent, treating each image as one flat vector."""
    y = np.asarray(y, dtype=np.float64)
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    if y.shape != y_tilde.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_tilde.shape}")
    norm = np.linalg.norm(y.ravel())
    if norm == 0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm((y - y_tilde).ravel()) / norm * 100.0)


def mean_reconstruction_error(net: GANomaly, images: list[np.ndarray]) -> float:
    return float(np.mean([reconstruction_error(x, reconstruct(net, x)) for x in images]))


# ---------------------------------------------------------------- checkpoint


@dataclass
class ModelCheckpoint:
    network_config: NetworkConfig
    train_config: TrainConfig
    state: dict[str, np.ndarray]
    epoch: int = 0
    e_rec_history: list[float] = field(default_factory=list)
    train_loss_history: list[float] = field(default_factory=list)
    region_index: int = 0
    dataset_fingerprint: str = ""
    calibration: dict | None = None
    format_version: int = FORMAT_VERSION

    def build_model(self) -> GANomaly:
        net = GANomaly(self.network_config)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        net.eval()
        return net

    @property
    def final_e_rec(self) -> float | None:
        return self.e_rec_history[-1] if self.e_rec_history else None


def _state_arrays(net: GANomaly) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def save_checkpoint(c: ModelCheckpoint, path: str | os.PathLike) -> None:
    """Layout: MAGIC | u32 version | u64 header length | JSON header | blobs.

    The header lists each blob's name, dtype, shape, offset, size and sha256.
    """
    blobs = []
    table = []
    offset = 0
    for name in sorted(c.state):
        arr = np.ascontiguousarray(c.state[name])
        raw = arr.tobytes()
        table.append({
            "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
            "offset": offset, "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": c.format_version,
        "network_config": asdict(c.network_config),
        "train_config": asdict(c.train_config),
        "epoch": c.epoch,
        "e_rec_history": c.e_rec_history,
        "train_loss_history": c.train_loss_history,
        "region_index": c.region_index,
        "dataset_fingerprint": c.dataset_fingerprint,
        "calibration": c.calibration,
        "blobs": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", c.format_version, len(head)))
    buf.write(head)
    for raw in blobs:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, head_len = struct.unpack_from("<IQ", data, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos:pos + head_len])
    base = pos + head_len
    state = {}
    for entry in header["blobs"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch in blob {entry['name']!r}")
        state[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    tc = dict(header["train_config"])
    return ModelCheckpoint(
        network_config=NetworkConfig(**header["network_config"]),
        train_config=TrainConfig(**tc),
        state=state,
        epoch=header["epoch"],
        e_rec_history=list(header["e_rec_history"]),
        train_loss_history=list(header.get("train_loss_history", [])),
        region_index=header["region_index"],
        dataset_fingerprint=header["dataset_fingerprint"],
        calibration=header.get("calibration"),
        format_version=version,
    )


# ---------------------------------------------------------------- training


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    return to_tensor(np.stack(images))


class GANomalyTrainer:
    """Alternating generator / discriminator updates on in-memory batches."""

    def __init__(self, net_cfg: NetworkConfig, train_cfg: TrainConfig):
        self.net_cfg = net_cfg
        self.cfg = train_cfg
        self.net = GANomaly(net_cfg, seed=train_cfg.seed)
        gen_params = list(self.net.generator.parameters())
        if not net_cfg.freeze_aux_encoder:
            gen_params += list(self.net.aux_encoder.parameters())
        adam = dict(lr=train_cfg.learning_rate, betas=train_cfg.betas, weight_decay=train_cfg.weight_decay)
        self.opt_g = torch.optim.Adam(gen_params, **adam)
        self.opt_d = torch.optim.Adam(self.net.discriminator.parameters(), **adam)
        self.schedulers = []
        if train_cfg.lr_schedule == "cosine":
            self.schedulers = [torch.optim.lr_scheduler.CosineAnnealingLR(o, train_cfg.epochs)
                               for o in (self.opt_g, self.opt_d)]

    def step(self, x: torch.Tensor) -> dict[str, float]:
        net = self.net
        net.train()
        # generator + auxiliary encoder
        out = net(x)
        _, f_real = net.discriminator(x)
        _, f_fake = net.discriminator(out["x_hat"])
        l_adv = loss_adversarial(f_real.detach(), f_fake)
        l_con = loss_contextual(x, out["x_hat"])
        l_enc = loss_encoder(out["z"], out["z_hat"])
        l_gen = loss_generator_total(l_adv, l_con, l_enc, self.net_cfg)
        if not torch.isfinite(l_gen):
            raise TrainingError(
                f"non-finite generator loss (adv={l_adv.item()}, con={l_con.item()}, enc={l_enc.item()})"
            )
        self.opt_g.zero_grad(set_to_none=True)
        l_gen.backward()
        self.opt_g.step()
        # discriminator
        logit_real, _ = net.discriminator(x)
        logit_fake, _ = net.discriminator(out["x_hat"].detach())
        l_d = loss_discriminator(logit_real, logit_fake)
        if not torch.isfinite(l_d):
            raise TrainingError(f"non-finite discriminator loss {l_d.item()}")
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()
        # reinitialise a discriminator that has collapsed to a perfect classifier
        if l_d.item() < 1e-5:
            net.discriminator.apply(_reinit)
        return {"gen": l_gen.item(), "adv": l_adv.item(), "con": l_con.item(),
                "enc": l_enc.item(), "disc": l_d.item()}

    def fit(self, images: list[np.ndarray], held_out: list[np.ndarray] | None = None,
            progress=None) -> tuple[list[float], list[float]]:
        """Train for ``cfg.epochs``; return (per-epoch mean generator loss, E_rec history)."""
        if len(images) < self.cfg.batch_size:
            raise TrainingError(f"{len(images)} training images, batch size {self.cfg.batch_size}")
        data = _stack(images)
        eval_set = held_out if held_out else images[: min(len(images), 16)]
        rng = np.random.default_rng(self.cfg.seed)
        n = len(images)
        n_batches = n // self.cfg.batch_size
        losses, e_rec = [], []
        for epoch in range(1, self.cfg.epochs + 1):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for b in range(n_batches):
                idx = order[b * self.cfg.batch_size:(b + 1) * self.cfg.batch_size]
                epoch_loss += self.step(data[torch.from_numpy(idx)])["gen"]
            losses.append(epoch_loss / n_batches)
            for sched in self.schedulers:
                sched.step()
            if epoch % self.cfg.eval_every == 0 or epoch == self.cfg.epochs:
                e_rec.append(mean_reconstruction_error(self.net, eval_set))
                if progress is not None:
                    progress(epoch, losses[-1], e_rec[-1])
        return losses, e_rec


def _reinit(m):
    if isinstance(m, (torch.nn.Conv2d, torch.nn.BatchNorm2d)):
        from .model import init_weights
        init_weights(m)


def load_region_images(manifest: DatasetManifest, region: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Materialise (training items, held-out originals) for one region."""
    from .imagecore import load_image

    cache: dict = {}
    train = [materialize_item(manifest, it, region, cache) for it in manifest.items_for_region(region)]
    spec = manifest.region_spec
    held = [prepare_region(load_image(Path(manifest.source_dir) / f), spec, region) for f in manifest.held_out]
    return train, held


def train(manifest: DatasetManifest, region: int, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          progress=None) -> ModelCheckpoint:
    """Train one region model from a manifest and return its checkpoint."""
    spec = manifest.region_spec
    if (spec.target_width, spec.target_height) != (net_cfg.input_width, net_cfg.input_height):
        raise TrainingError(
            f"manifest tiles are {spec.target_width}x{spec.target_height}, "
            f"network expects {net_cfg.input_width}x{net_cfg.input_height}"
        )
    images, held = load_region_images(manifest, region)
    if not images:
        raise TrainingError("empty dataset")
    torch.use_deterministic_algorithms(True)
    trainer = GANomalyTrainer(net_cfg, train_cfg)
    losses, e_rec = trainer.fit(images, held, progress=progress)
    return ModelCheckpoint(
        network_config=net_cfg,
        train_config=train_cfg,
        state=_state_arrays(trainer.net),
        epoch=train_cfg.epochs,
        e_rec_history=e_rec,
        train_loss_history=losses,
        region_index=region,
        dataset_fingerprint=manifest.fingerprint(),
    )


def calibration_images(manifest: DatasetManifest, region: int, limit: int) -> list[np.ndarray]:
    """Un-augmented training frames of one region, in manifest order."""
    from .imagecore import load_image

    spec = manifest.region_spec
    files = [it["file"] for it in manifest.items_for_region(region) if it["aug"] == "orig"][:limit]
    return [prepare_region(load_image(Path(manifest.source_dir) / f), spec, region) for f in files]


def calibrate(c: ModelCheckpoint, clean: list[np.ndarray], pp_cfg) -> ModelCheckpoint:
    """Store detection thresholds derived from clean images in the checkpoint."""
    from .postprocess import calibrate_thresholds

    net = c.build_model()
    pairs = [(x, reconstruct(net, x)) for x in clean]
    tuned = calibrate_thresholds(pairs, pp_cfg)
    c.calibration = {
        "tau_ms": tuned.tau_ms, "tau_ssim": tuned.tau_ssim, "n_images": len(clean),
        "ms_percentile": pp_cfg.ms_percentile, "ssim_percentile": pp_cfg.ssim_percentile,
    }
    return c


def checkpoint_from_net(net: GANomaly, train_cfg: TrainConfig, **meta) -> ModelCheckpoint:
    return ModelCheckpoint(network_config=net.cfg, train_config=train_cfg, state=_state_arrays(net), **meta)
