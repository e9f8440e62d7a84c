"""Learnable codebook with nearest-neighbor quantization.

Each latent vector is replaced by its nearest codebook entry under squared
Euclidean distance, ties broken toward the lowest index. The straight-through
form passes decoder gradients unchanged to the encoder output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


class Codebook(nn.Module):
    """K learnable d-dimensional embeddings with a nearest-entry lookup."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        if size < 2:
            raise ValueError(f"codebook size must be >= 2, got {size}")
        if dim < 1:
            raise ValueError(f"embedding dim must be >= 1, got {dim}")
        self.size = size
        self.dim = dim
        self.embedding = nn.Embedding(size, dim)
        self.embedding.weight.data.uniform_(-1.0 / size, 1.0 / size)

    @property
    def entries(self) -> torch.Tensor:
        return self.embedding.weight

    def nearest(self, vectors: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
        """Indices of the nearest entry for each row of (N, d) vectors.

        Distances are computed in the direct (v - e)^2 form so results match
        an exhaustive search bit for bit; argmin returns the first (lowest)
        index on ties.
        """
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ValueError(f"expected (N, {self.dim}) vectors, got {tuple(vectors.shape)}")
        entries = self.entries.detach().to(vectors.dtype)
        out = torch.empty(vectors.shape[0], dtype=torch.long, device=vectors.device)
        for start in range(0, vectors.shape[0], chunk):
            block = vectors[start:start + chunk]
            d2 = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
            out[start:start + chunk] = d2.argmin(dim=1)
        return out

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Quantize a (B, d, H, W) latent; returns (z_q, indices (B, H, W))."""
        b, c, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        idx = self.nearest(flat)
        z_q = self.embedding(idx).reshape(b, h, w, c).permute(0, 3, 1, 2)
        return z_q, idx.reshape(b, h, w)

    @staticmethod
    def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
        """Quantized values in the forward pass, identity in the backward.

        Written so the forward result is bit-identical to z_q (z - z.detach()
        is exactly zero), while the gradient w.r.t. z is exactly one.
        """
        return z_q.detach() + (z - z.detach())


@dataclass
class LatentCode:
    """Continuous and quantized latent grids for one image or mask."""

    continuous: np.ndarray   # h x w x c
    quantized: np.ndarray    # h x w x c, every vector an exact codebook entry
    indices: np.ndarray      # h x w integer grid
    f: int                   # spatial downsampling factor, a power of two

    def __post_init__(self):
        if self.f < 1 or (self.f & (self.f - 1)) != 0:
            raise ValueError(f"downsampling factor must be a power of two, got {self.f}")
        if self.continuous.shape != self.quantized.shape:
            raise ValueError("continuous/quantized shape mismatch")
        if self.indices.shape != self.continuous.shape[:2]:
            raise ValueError("indices grid does not match latent spatial dims")


def _entry_matrix(codebook) -> np.ndarray:
    if isinstance(codebook, Codebook):
        return codebook.entries.detach().cpu().numpy().astype(np.float64)
    arr = np.asarray(codebook, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("codebook must be a (K >= 2, d) matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("codebook entries must be finite")
    return arr


def quantize(z, codebook, f: int = 1) -> LatentCode:
    """Snap each latent vector of an (h, w, c) grid to its nearest entry."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"expected (h, w, c) latent, got shape {z.shape}")
    entries = _entry_matrix(codebook)
    if z.shape[2] != entries.shape[1]:
        raise ValueError(f"latent channels {z.shape[2]} != codebook dim {entries.shape[1]}")
    flat = z.reshape(-1, z.shape[2])
    d2 = ((flat[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
    idx = d2.argmin(axis=1)
    quantized = entries[idx].reshape(z.shape)
    return LatentCode(continuous=z, quantized=quantized,
                      indices=idx.reshape(z.shape[:2]), f=f)
