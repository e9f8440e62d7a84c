"""Vector-quantized autoencoders for images and masks.

Two independently trained networks compress pixels into a discrete-codebook
latent space: an image autoencoder trained with MSE and a mask autoencoder
trained with MSE or weighted cross-entropy. The encoder halves the spatial
dims once per level (factor f = 2^levels; levels = 0 keeps pixel resolution),
using two residual blocks per level with channel width doubling from
``base_channels`` up to a 512 cap. The decoder mirrors the encoder with
nearest-neighbor upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .quantize import Codebook

MODES = ("image_mse", "mask_mse", "mask_wce")
CHANNEL_CAP = 512


@dataclass
class AutoencoderConfig:
    levels: int = 3
    base_channels: int = 128
    latent_channels: int = 3
    mode: str = "image_mse"
    in_channels: int = 1
    codebook_size: int = 512
    pos_weight: float = 5.0
    commitment_beta: float = 0.25

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "image_mse" and self.in_channels != 1:
            raise ValueError("mask modes take single-channel input")
        if self.mode == "mask_wce" and self.pos_weight < 1.0:
            raise ValueError("pos_weight must be >= 1")
        if self.commitment_beta <= 0.0:
            raise ValueError("commitment_beta must be positive")
        if self.codebook_size < 2 or self.latent_channels < 1:
            raise ValueError("codebook_size >= 2 and latent_channels >= 1 required")

    @property
    def f(self) -> int:
        return 2 ** self.levels

    @property
    def out_channels(self) -> int:
        if self.mode == "mask_wce":
            return 2
        if self.mode == "mask_mse":
            return 1
        return self.in_channels

    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**i, CHANNEL_CAP) for i in range(self.levels + 1)]


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        widths = config.widths()
        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        stages = []
        for i in range(config.levels):
            stages += [ResidualBlock(widths[i], widths[i]),
                       ResidualBlock(widths[i], widths[i]),
                       nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)]
        self.stages = nn.Sequential(*stages)
        self.mid = ResidualBlock(widths[-1], widths[-1])
        self.out_norm = _norm(widths[-1])
        self.to_latent = nn.Conv2d(widths[-1], config.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.mid(self.stages(self.stem(x)))
        return self.to_latent(F.silu(self.out_norm(h)))


class Decoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        widths = config.widths()
        self.from_latent = nn.Conv2d(config.latent_channels, widths[-1], 3, padding=1)
        self.mid = ResidualBlock(widths[-1], widths[-1])
        stages = []
        for i in reversed(range(config.levels)):
            stages += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(widths[i + 1], widths[i], 3, padding=1),
                       ResidualBlock(widths[i], widths[i]),
                       ResidualBlock(widths[i], widths[i])]
        self.stages = nn.Sequential(*stages)
        self.out_norm = _norm(widths[0])
        self.head = nn.Conv2d(widths[0], config.out_channels, 3, padding=1)

    def forward(self, z):
        h = self.stages(self.mid(self.from_latent(z)))
        return self.head(F.silu(self.out_norm(h)))


class VQAutoencoder(nn.Module):
    """Encoder, codebook, decoder; embedding dim equals the latent channels."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.codebook = Codebook(config.codebook_size, config.latent_channels)
        self.decoder = Decoder(config)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        return self.decoder(z_q)

    def forward(self, x: torch.Tensor):
        """Returns (reconstruction, z, z_q, indices).

        The decoder consumes the straight-through latent, so reconstruction
        gradients reach the encoder; z and z_q are returned raw for the
        codebook/commitment terms.
        """
        z = self.encoder(x)
        z_q, indices = self.codebook(z)
        recon = self.decoder(Codebook.straight_through(z, z_q))
        return recon, z, z_q, indices


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def wce_loss(logits, target, pos_weight: float) -> torch.Tensor:
    """Weighted two-class cross-entropy over per-pixel logits.

    ``logits`` carries the two class scores in its last axis; ``target`` is
    the matching binary grid. Foreground pixels get weight ``pos_weight``,
    background weight 1, and the weighted sum is divided by the weight sum,
    so pos_weight = 1 reduces to plain cross-entropy and a uniform
    prediction scores ln 2 regardless of the weighting.
    """
    if pos_weight < 1.0:
        raise ValueError(f"pos_weight must be >= 1, got {pos_weight}")
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    if not torch.is_tensor(target):
        target = torch.as_tensor(np.asarray(target))
    if logits.shape[-1] != 2:
        raise ValueError(f"logits must have 2 classes in the last axis, got {tuple(logits.shape)}")
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    uniq = torch.unique(target)
    if not bool(((uniq == 0) | (uniq == 1)).all()):
        raise ValueError("target must be binary")

    fg = target.bool()
    logp = torch.log_softmax(logits, dim=-1)
    ce = -torch.where(fg, logp[..., 1], logp[..., 0])
    weights = torch.where(fg, ce.new_tensor(float(pos_weight)), ce.new_tensor(1.0))
    return (weights * ce).sum() / weights.sum()


@dataclass
class VQLosses:
    rec: torch.Tensor
    codebook: torch.Tensor
    commit: torch.Tensor
    total: torch.Tensor


def vq_losses(target: torch.Tensor, z: torch.Tensor, z_q: torch.Tensor,
              reconstruction: torch.Tensor, config: AutoencoderConfig) -> VQLosses:
    """Reconstruction + codebook + commitment objective.

    ``target`` is the training input in network domain (images in [-1, 1],
    masks in {0, 1}); tensors are NCHW. Stop-gradients route the codebook
    term to the entries only and the commitment term to the encoder only.
    """
    if z.shape != z_q.shape:
        raise ValueError(f"z {tuple(z.shape)} vs z_q {tuple(z_q.shape)} shape mismatch")
    if config.mode == "mask_wce":
        logits = reconstruction.permute(0, 2, 3, 1)
        rec = wce_loss(logits, target[:, 0], config.pos_weight)
    else:
        if reconstruction.shape != target.shape:
            raise ValueError(f"reconstruction {tuple(reconstruction.shape)} vs "
                             f"target {tuple(target.shape)} shape mismatch")
        rec = F.mse_loss(reconstruction, target)
    codebook = F.mse_loss(z_q, z.detach())
    commit = config.commitment_beta * F.mse_loss(z, z_q.detach())
    total = rec + codebook + commit
    for name, term in (("rec", rec), ("codebook", codebook), ("commit", commit)):
        if not torch.isfinite(term):
            raise FloatingPointError(f"non-finite {name} loss")
    return VQLosses(rec=rec, codebook=codebook, commit=commit, total=total)


# ---------------------------------------------------------------------------
# Array-level contract helpers (single samples, channels-last numpy)
# ---------------------------------------------------------------------------

def to_network_domain(grid: np.ndarray, mode: str) -> np.ndarray:
    """Images map [0, 1] -> [-1, 1]; masks stay {0, 1}."""
    return grid * 2.0 - 1.0 if mode == "image_mse" else grid


def from_network_domain(grid: np.ndarray, mode: str) -> np.ndarray:
    return np.clip((grid + 1.0) / 2.0, 0.0, 1.0) if mode == "image_mse" else grid


def _to_nchw(grid: np.ndarray, expected_channels: int) -> torch.Tensor:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[..., None]
    if grid.ndim != 3 or grid.shape[2] != expected_channels:
        raise ValueError(f"expected (H, W, {expected_channels}) grid, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("non-finite input grid")
    return torch.from_numpy(grid.astype(np.float32)).permute(2, 0, 1)[None]


def encode(grid: np.ndarray, model: VQAutoencoder) -> np.ndarray:
    """Encode one channels-last grid to its continuous (h, w, c) latent."""
    cfg = model.config
    x = _to_nchw(to_network_domain(np.asarray(grid, dtype=np.float64), cfg.mode),
                 cfg.in_channels)
    h, w = x.shape[2], x.shape[3]
    if h % cfg.f or w % cfg.f:
        raise ValueError(f"spatial dims {h}x{w} not divisible by f={cfg.f}")
    with torch.no_grad():
        z = model.encode(x)
    return z[0].permute(1, 2, 0).numpy().astype(np.float64)


def decode(latent: np.ndarray, model: VQAutoencoder) -> np.ndarray:
    """Decode one (h, w, c) latent; images come back in [0, 1].

    Mask modes return raw network output: (H, W, 2) class logits for WCE,
    (H, W, 1) reals for MSE.
    """
    cfg = model.config
    z = _to_nchw(latent, cfg.latent_channels)
    with torch.no_grad():
        y = model.decode(z)
    out = y[0].permute(1, 2, 0).numpy().astype(np.float64)
    return from_network_domain(out, cfg.mode)


def binarize_decoded(decoded: np.ndarray, mode: str) -> np.ndarray:
    """Hard mask from decoder output: argmax for WCE, 0.5 threshold for MSE."""
    if mode == "mask_wce":
        return (decoded[..., 1] > decoded[..., 0]).astype(np.uint8)
    if mode == "mask_mse":
        return (decoded[..., 0] >= 0.5).astype(np.uint8)
    raise ValueError(f"not a mask mode: {mode!r}")


def reconstruct_mask(mask: np.ndarray, model: VQAutoencoder) -> np.ndarray:
    """Round-trip a binary mask through encode -> quantize -> decode."""
    z = encode(mask.astype(np.float64), model)
    with torch.no_grad():
        zt = torch.from_numpy(z.astype(np.float32)).permute(2, 0, 1)[None]
        z_q, _ = model.codebook(zt)
    decoded = decode(z_q[0].permute(1, 2, 0).numpy(), model)
    return binarize_decoded(decoded, model.config.mode)
