"""GANomaly-style networks and losses.

Generator ``G = G_D o G_E`` autoencodes the image, a discriminator ``D``
scores real vs. reconstructed images and exposes penultimate features ``f``,
and an auxiliary encoder ``E`` (same architecture as ``G_E``) re-embeds the
reconstruction.  Tensors are NCHW inside the networks; the public helpers
accept HWC numpy images in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetworkConfig:
    input_width: int = 640
    input_height: int = 480
    latent_dim: int = 128
    base_channels: int = 64
    n_down_blocks: int = 4
    w_adv: float = 1.0
    w_con: float = 40.0
    w_enc: float = 1.0
    freeze_aux_encoder: bool = False
    generator_norm: str = "batch"  # batch | none

    def __post_init__(self):
        f = 2 ** self.n_down_blocks
        if self.n_down_blocks < 1:
            raise ValueError("n_down_blocks must be >= 1")
        if self.input_width % f or self.input_height % f:
            raise ValueError(
                f"input {self.input_width}x{self.input_height} not divisible by 2^{self.n_down_blocks}"
            )
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ValueError("latent_dim and base_channels must be positive")
        if min(self.w_adv, self.w_con, self.w_enc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.generator_norm not in ("batch", "none"):
            raise ValueError(f"unknown generator_norm {self.generator_norm!r}")

    @property
    def bottom_shape(self) -> tuple[int, int, int]:
        f = 2 ** self.n_down_blocks
        return (self.base_channels * 2 ** (self.n_down_blocks - 1), self.input_height // f, self.input_width // f)


def _down(cin: int, cout: int, norm: bool) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2, inplace=False))
    return layers


class Encoder(nn.Module):
    """Stride-2 conv blocks followed by a linear map to the latent vector."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        layers: list[nn.Module] = []
        cin, cout = 3, cfg.base_channels
        for i in range(cfg.n_down_blocks):
            layers += _down(cin, cout, norm=i > 0 and cfg.generator_norm == "batch")
            cin, cout = cout, cout * 2
        self.features = nn.Sequential(*layers)
        c, h, w = cfg.bottom_shape
        self.fc = nn.Linear(c * h * w, cfg.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x).flatten(1))


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.bottom = cfg.bottom_shape
        c, h, w = self.bottom
        self.fc = nn.Linear(cfg.latent_dim, c * h * w)
        layers: list[nn.Module] = []
        cin = c
        for i in range(cfg.n_down_blocks - 1):
            if cfg.generator_norm == "batch":
                layers += [nn.ConvTranspose2d(cin, cin // 2, 4, 2, 1, bias=False), nn.BatchNorm2d(cin // 2)]
            else:
                layers += [nn.ConvTranspose2d(cin, cin // 2, 4, 2, 1)]
            layers.append(nn.ReLU())
            cin //= 2
        layers.append(nn.ConvTranspose2d(cin, 3, 4, 2, 1))
        self.up = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # no batch-norm here: it would make the decoder blind to the latent's scale
        h = F.relu(self.fc(z).view(-1, *self.bottom))
        return torch.sigmoid(self.up(h))


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.encoder(x)
        return self.decoder(z), z


class Discriminator(nn.Module):
    """DCGAN discriminator; ``features`` is the penultimate activation ``f(x)``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        layers: list[nn.Module] = []
        cin, cout = 3, cfg.base_channels
        for i in range(cfg.n_down_blocks):
            layers += _down(cin, cout, norm=i > 0)
            cin, cout = cout, cout * 2
        self.features = nn.Sequential(*layers)
        c, h, w = cfg.bottom_shape
        self.classifier = nn.Conv2d(c, 1, (h, w), 1, 0)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.features(x)
        logit = self.classifier(feat).flatten()
        return logit, feat.flatten(1)


def init_weights(module: nn.Module) -> None:
    """DCGAN init: N(0, 0.02) conv/linear weights, N(1, 0.02) batch-norm scales."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class GANomaly(nn.Module):
    """Container for the three sub-networks sharing one config."""

    def __init__(self, cfg: NetworkConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        if seed is not None:
            torch.manual_seed(seed)
        self.generator = Generator(cfg)
        self.discriminator = Discriminator(cfg)
        self.aux_encoder = Encoder(cfg)
        self.apply(init_weights)
        if cfg.freeze_aux_encoder:
            self.aux_encoder.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        x_hat, z = self.generator(x)
        z_hat = self.aux_encoder(x_hat)
        return {"x_hat": x_hat, "z": z, "z_hat": z_hat}


# ---------------------------------------------------------------- losses
# Each accepts a batch (leading dim = batch) or a single sample.


def loss_contextual(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every element."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def loss_adversarial(f_x: torch.Tensor, f_xhat: torch.Tensor) -> torch.Tensor:
    """Feature matching: L2 distance between batch-averaged feature vectors."""
    if f_x.shape[-1] != f_xhat.shape[-1]:
        raise ValueError(f"feature length mismatch {f_x.shape[-1]} vs {f_xhat.shape[-1]}")
    if f_x.dim() > 1:
        f_x, f_xhat = f_x.mean(0), f_xhat.mean(0)
    return _l2(f_x - f_xhat)


def loss_encoder(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-sample L2 distances between latent vectors."""
    if z.shape != z_hat.shape:
        raise ValueError(f"latent shape mismatch {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    if z.dim() == 1:
        return _l2(z - z_hat)
    return _l2(z - z_hat, dim=-1).mean()


def _l2(v: torch.Tensor, dim=None) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; the tiny floor keeps gradients finite
    sq = (v * v).sum() if dim is None else (v * v).sum(dim)
    return torch.sqrt(sq + 1e-24)


def loss_generator_total(l_adv, l_con, l_enc, cfg: NetworkConfig):
    return cfg.w_adv * l_adv + cfg.w_con * l_con + cfg.w_enc * l_enc


def loss_discriminator(logit_real: torch.Tensor, logit_fake: torch.Tensor) -> torch.Tensor:
    """BCE with target 1 for real inputs and 0 for reconstructions, averaged
    over both halves.  Takes logits for numerical stability."""
    real = F.binary_cross_entropy_with_logits(logit_real, torch.ones_like(logit_real))
    fake = F.binary_cross_entropy_with_logits(logit_fake, torch.zeros_like(logit_fake))
    return 0.5 * (real + fake)


def bce_from_probabilities(p_real: np.ndarray, p_fake: np.ndarray) -> float:
    """Same objective as :func:`loss_discriminator`, stated on probabilities."""
    p_real = np.asarray(p_real, dtype=np.float64)
    p_fake = np.asarray(p_fake, dtype=np.float64)
    return float(0.5 * (-np.log(p_real).mean() - np.log1p(-p_fake).mean()))


# ---------------------------------------------------------------- numpy-facing inference


def to_tensor(img: np.ndarray | list[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


def _check_dims(net: GANomaly, x: np.ndarray) -> None:
    cfg = net.cfg
    if x.shape[-3:] != (cfg.input_height, cfg.input_width, 3):
        raise ValueError(
            f"image shape {x.shape[-3:]} does not match network input "
            f"({cfg.input_height}, {cfg.input_width}, 3)"
        )


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


@torch.no_grad()
def encode(net: GANomaly, x: np.ndarray) -> np.ndarray:
    _check_dims(net, x)
    net.eval()
    z = net.generator.encoder(to_tensor(x, _dtype(net)))
    return z.double().numpy().squeeze(0)


@torch.no_grad()
def decode(net: GANomaly, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] != net.cfg.latent_dim:
        raise ValueError(f"latent length {z.shape[-1]} != {net.cfg.latent_dim}")
    net.eval()
    zt = torch.from_numpy(np.atleast_2d(z)).to(_dtype(net))
    return to_image(net.generator.decoder(zt))


@torch.no_grad()
def reconstruct(net: GANomaly, x: np.ndarray) -> np.ndarray:
    _check_dims(net, x)
    net.eval()
    x_hat, _ = net.generator(to_tensor(x, _dtype(net)))
    return to_image(x_hat)


@torch.no_grad()
def discriminate(net: GANomaly, x: np.ndarray) -> tuple[np.ndarray, float]:
    _check_dims(net, x)
    net.eval()
    logit, feat = net.discriminator(to_tensor(x, _dtype(net)))
    return feat.double().numpy().squeeze(0), float(torch.sigmoid(logit.double())[0])
