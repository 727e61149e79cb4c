"""Transformer encoder/decoder mapping frame sequences to a fixed set of latents and back."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "EncoderConfig",
    "SequenceEncoder",
    "SequenceDecoder",
    "sinusoidal_encoding",
    "lengths_to_padding_mask",
    "reconstruction_loss",
    "masked_squared_error",
]

PHASE_FEATURES = 16


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 256
    layers: int = 5
    heads: int = 4
    latent_dim: int = 32
    latent_count: int = 30
    dropout: float = 0.2
    max_frames: int = 64
    ff_mult: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.latent_count < 1 or self.latent_dim < 1 or self.layers < 1:
            raise ValueError("latent_count, latent_dim and layers must be >= 1")


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sine/cosine encoding of (possibly fractional) positions, ``(..., dim)``."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=positions.dtype) / max(half, 1))
    angles = positions[..., None] * freq
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


def _phase_features(lengths: torch.Tensor, frames: int, dtype) -> torch.Tensor:
    """``B x frames x 16`` encoding of the relative position ``t / (length - 1)``."""
    t = torch.arange(frames, dtype=dtype)
    u = t[None, :] / (lengths[:, None].to(dtype) - 1).clamp_min(1)
    k = torch.arange(1, PHASE_FEATURES // 2 + 1, dtype=dtype)
    angles = math.pi * u[..., None] * k
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def lengths_to_padding_mask(lengths: torch.Tensor, frames: int) -> torch.Tensor:
    """True where a frame is padding."""
    return torch.arange(frames)[None, :] >= lengths[:, None]


def _check_input(x: torch.Tensor, lengths: torch.Tensor, max_frames: int) -> None:
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError("expected a non-empty B x T x F batch")
    if x.shape[1] > max_frames:
        raise ValueError(f"{x.shape[1]} frames exceed max_frames={max_frames}")
    if (lengths < 1).any() or (lengths > x.shape[1]).any():
        raise ValueError("lengths must lie in [1, T]")


class SequenceEncoder(nn.Module):
    """Frames plus ``latent_count`` learned query tokens through a Transformer encoder.

    The query positions' outputs are projected to ``latent_dim``, giving
    ``B x latent_count x latent_dim`` continuous latents.
    """

    def __init__(self, in_features: int, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.cfg = cfg
        self.embed = nn.Linear(in_features, d)
        self.phase = nn.Linear(PHASE_FEATURES, d)
        self.queries = nn.Parameter(0.02 * torch.randn(cfg.latent_count, d))
        layer = nn.TransformerEncoderLayer(d, cfg.heads, cfg.ff_mult * d, cfg.dropout,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, cfg.latent_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        B, T, _ = x.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        _check_input(x, lengths, self.cfg.max_frames)
        d = self.cfg.model_dim
        pos = sinusoidal_encoding(torch.arange(T, dtype=x.dtype), d)
        h = self.embed(x) + pos + self.phase(_phase_features(lengths, T, x.dtype))
        q = self.queries.to(x.dtype).expand(B, -1, -1)
        seq = torch.cat([h, q], dim=1)
        pad = torch.cat([lengths_to_padding_mask(lengths, T),
                         torch.zeros(B, self.cfg.latent_count, dtype=torch.bool)], dim=1)
        out = self.encoder(seq, src_key_padding_mask=pad)
        return self.proj(self.norm(out[:, T:]))


class SequenceDecoder(nn.Module):
    """Positionally encoded frame queries cross-attending over projected latents."""

    def __init__(self, out_features: int, cfg: EncoderConfig, zero_init_head: bool = False):
        super().__init__()
        d = cfg.model_dim
        self.cfg = cfg
        self.out_features = out_features
        self.latent_in = nn.Linear(cfg.latent_dim, d)
        self.slots = nn.Parameter(0.02 * torch.randn(cfg.latent_count, d))
        self.query = nn.Parameter(torch.zeros(d))
        self.phase = nn.Linear(PHASE_FEATURES, d)
        layer = nn.TransformerDecoderLayer(d, cfg.heads, cfg.ff_mult * d, cfg.dropout,
                                           batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.layers)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, out_features)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor, out_frames: int, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if z.ndim != 3 or z.shape[1] != self.cfg.latent_count:
            raise ValueError(f"expected B x {self.cfg.latent_count} x {self.cfg.latent_dim} latents")
        if not 1 <= out_frames <= self.cfg.max_frames:
            raise ValueError(f"out_frames={out_frames} outside [1, {self.cfg.max_frames}]")
        B = z.shape[0]
        if lengths is None:
            lengths = torch.full((B,), out_frames, dtype=torch.long)
        d = self.cfg.model_dim
        memory = self.latent_in(z) + self.slots.to(z.dtype)
        pos = sinusoidal_encoding(torch.arange(out_frames, dtype=z.dtype), d)
        tgt = (self.query.to(z.dtype) + pos).expand(B, -1, -1) + self.phase(
            _phase_features(lengths, out_frames, z.dtype))
        pad = lengths_to_padding_mask(lengths, out_frames)
        out = self.decoder(tgt, memory, tgt_key_padding_mask=pad)
        return self.head(self.norm(out))


def reconstruction_loss(X: torch.Tensor, X_hat: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of ``(X - X_hat)^2``."""
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {tuple(X.shape)} vs {tuple(X_hat.shape)}")
    return F.mse_loss(X_hat, X)


def masked_squared_error(X: torch.Tensor, X_hat: torch.Tensor, lengths: torch.Tensor):
    """Sum of squared error over valid frames and the matching element count."""
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {tuple(X.shape)} vs {tuple(X_hat.shape)}")
    valid = (~lengths_to_padding_mask(lengths, X.shape[1])).to(X.dtype)
    sq = ((X_hat - X) ** 2).sum(-1)
    return (sq * valid).sum(), valid.sum() * X.shape[-1]
