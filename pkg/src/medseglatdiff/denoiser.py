"""Noise-prediction UNet with sinusoidal time embedding.

Takes the channel concatenation of a noisy mask latent and the clean image
latent and predicts the noise component of the mask channels. Width doubles
per downsampling stage (capped at 512); the time embedding has dimension
4x base width and is injected into every residual block. The output conv is
zero-initialized so an untrained network predicts zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHANNEL_CAP = 512


@dataclass
class DenoiserConfig:
    in_channels: int
    out_channels: int
    base_channels: int = 128
    levels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.in_channels <= self.out_channels:
            raise ValueError("conditioned input must have more channels than the output")

    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**i, CHANNEL_CAP) for i in range(self.levels + 1)]


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional features of the step index, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :].to(t.device)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class TimedResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        time_dim = 4 * config.base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            TimedResidualBlock(widths[i], widths[i], time_dim) for i in range(config.levels)
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(config.levels)
        )
        self.mid1 = TimedResidualBlock(widths[-1], widths[-1], time_dim)
        self.mid2 = TimedResidualBlock(widths[-1], widths[-1], time_dim)
        self.ups = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in reversed(range(config.levels))
        )
        self.up_blocks = nn.ModuleList(
            TimedResidualBlock(2 * widths[i], widths[i], time_dim) for i in reversed(range(config.levels))
        )
        self.out_norm = _norm(widths[0])
        self.head = nn.Conv2d(widths[0], config.out_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """x: (N, in_channels, h, w); t: (N,) step indices. Returns mask-channel noise."""
        if x.shape[2] % 2**self.config.levels or x.shape[3] % 2**self.config.levels:
            raise ValueError(
                f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by 2^{self.config.levels}"
            )
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.config.base_channels))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid1(h, temb), temb)
        for conv, block in zip(self.ups, self.up_blocks):
            h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.head(F.silu(self.out_norm(h)))
