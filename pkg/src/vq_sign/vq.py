"""Codebooks, nearest-code quantization and codebook-collapse countermeasures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "Codebook",
    "QuantizeOutcome",
    "GumbelSchedule",
    "squared_distances",
    "quantize_hard",
    "quantize_gumbel",
    "straight_through",
    "diversity_loss",
    "perplexity",
    "dead_code_threshold",
    "reinit_dead_codes",
]


class Codebook(nn.Module):
    """``K`` learnable code vectors of width ``L_c`` plus a usage tally.

    One instance may serve several streams; ``streams`` records which.
    ``reserved`` maps a feature name to a half-open index range whose codes
    are pre-assigned to that feature's classes.
    """

    def __init__(self, size: int, dim: int, streams=(), generator: torch.Generator | None = None):
        super().__init__()
        if size < 1 or dim < 1:
            raise ValueError("codebook size and dim must be >= 1")
        weight = torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size, generator=generator)
        self.weight = nn.Parameter(weight)
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))
        self.streams = tuple(streams)
        self.reserved: dict[str, tuple[int, int]] = {}

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def reserve(self, feature: str, start: int, stop: int) -> None:
        if not 0 <= start < stop <= self.size:
            raise ValueError(f"range [{start}, {stop}) outside codebook of size {self.size}")
        for name, (a, b) in self.reserved.items():
            if name != feature and start < b and a < stop:
                raise ValueError(f"range for {feature!r} overlaps {name!r}")
        self.reserved[feature] = (start, stop)

    @torch.no_grad()
    def record_usage(self, indices: torch.Tensor) -> None:
        self.usage_counts += torch.bincount(indices.reshape(-1), minlength=self.size)

    def extra_repr(self) -> str:
        return f"size={self.size}, dim={self.dim}, streams={[getattr(s, 'value', s) for s in self.streams]}"


@dataclass
class QuantizeOutcome:
    """Result of quantizing ``N`` encoder rows against one codebook.

    ``z_q`` holds the selected code rows; in hard mode it carries no gradient
    (the codebook learns only through ``loss_codebook``), in Gumbel mode it
    carries the relaxed-sample gradient.
    """

    indices: torch.Tensor
    z_q: torch.Tensor
    loss_codebook: torch.Tensor
    loss_commit: torch.Tensor
    loss_diversity: torch.Tensor
    perplexity: float
    forced_mask: torch.Tensor
    z_e: torch.Tensor | None = field(default=None, repr=False)


@dataclass
class GumbelSchedule:
    """Exponential temperature decay ``max(end, start * exp(-step / decay_steps))``."""

    start_temperature: float = 1.0
    end_temperature: float = 0.1
    decay_steps: float = 1000.0
    current_step: int = 0

    def __post_init__(self):
        if not self.start_temperature >= self.end_temperature > 0:
            raise ValueError("need start_temperature >= end_temperature > 0")
        if self.decay_steps <= 0:
            raise ValueError("decay_steps must be positive")

    def temperature(self, step: int | None = None) -> float:
        step = self.current_step if step is None else step
        return max(self.end_temperature, self.start_temperature * math.exp(-step / self.decay_steps))

    def advance(self) -> float:
        tau = self.temperature()
        self.current_step += 1
        return tau


def squared_distances(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """``N x K`` matrix of ``||z_i - c_j||^2``, computed from explicit differences."""
    return (z[:, None, :] - codes[None, :, :]).pow(2).sum(-1)


def _soft_distances(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Differentiable ``||z||^2 - 2 z.c + ||c||^2``; only feeds softmaxes, never the argmin."""
    return (z.pow(2).sum(1, keepdim=True) - 2.0 * z @ codes.T + codes.pow(2).sum(1)[None, :]).clamp_min(0.0)


def _check(z_e: torch.Tensor, book: Codebook) -> None:
    if z_e.ndim != 2 or z_e.shape[1] != book.dim:
        raise ValueError(f"expected N x {book.dim} encoder rows, got {tuple(z_e.shape)}")


def _batch_perplexity(indices: torch.Tensor, size: int) -> float:
    if indices.numel() == 0:
        return 1.0
    return perplexity(torch.bincount(indices, minlength=size))


def _finish(z_e, book, indices, z_q, dist, diversity_tau, update_usage) -> QuantizeOutcome:
    selected = book.weight[indices]
    soft = torch.softmax(-dist / diversity_tau, dim=1)
    if update_usage:
        book.record_usage(indices)
    return QuantizeOutcome(
        indices=indices,
        z_q=z_q,
        loss_codebook=F.mse_loss(selected, z_e.detach()),
        loss_commit=F.mse_loss(z_e, selected.detach()),
        loss_diversity=diversity_loss(soft, check=False),
        perplexity=_batch_perplexity(indices, book.size),
        forced_mask=torch.zeros_like(indices, dtype=torch.bool),
        z_e=z_e,
    )


def quantize_hard(z_e: torch.Tensor, book: Codebook, update_usage: bool = True,
                  diversity_tau: float = 1.0) -> QuantizeOutcome:
    """Nearest-code assignment ``argmin_j ||z_e - c_j||^2``; ties go to the lowest index."""
    _check(z_e, book)
    with torch.no_grad():
        indices = torch.argmin(squared_distances(z_e, book.weight), dim=1)
    dist = _soft_distances(z_e, book.weight)
    z_q = book.weight.detach()[indices]
    return _finish(z_e, book, indices, z_q, dist, diversity_tau, update_usage)


def quantize_gumbel(z_e: torch.Tensor, book: Codebook, temperature: float,
                    generator: torch.Generator | None = None, update_usage: bool = True,
                    diversity_tau: float = 1.0) -> QuantizeOutcome:
    """Sample codes with probability ``softmax(-d / temperature)`` via the Gumbel-max trick.

    The forward value snaps to the sampled code row; the backward pass goes
    through the relaxed sample ``softmax(-d / temperature + g)``.
    """
    _check(z_e, book)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    dist = _soft_distances(z_e, book.weight)
    u = torch.rand(dist.shape, generator=generator, dtype=dist.dtype)
    gumbel = -torch.log(-torch.log(u.clamp_min(torch.finfo(dist.dtype).tiny)))
    logits = -dist / temperature + gumbel
    indices = torch.argmax(logits.detach(), dim=1)
    relaxed = torch.softmax(logits, dim=1) @ book.weight
    # a - a.detach() is exactly zero, so the forward value is the code row bit for bit
    z_q = book.weight.detach()[indices] + (relaxed - relaxed.detach())
    return _finish(z_e, book, indices, z_q, dist, diversity_tau, update_usage)


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; the gradient reaching it is copied onto ``z_e`` unchanged."""
    if z_e.shape != z_q.shape:
        raise ValueError(f"shape mismatch {tuple(z_e.shape)} vs {tuple(z_q.shape)}")
    return z_q + (z_e - z_e.detach())


def diversity_loss(soft_assignments: torch.Tensor, check: bool = True) -> torch.Tensor:
    """``1 - H(p_bar) / log K`` for the column mean ``p_bar`` of soft assignments."""
    p = soft_assignments
    if check:
        if p.ndim != 2:
            raise ValueError("soft assignments must be N x K")
        sums = p.detach().sum(1)
        if (p.detach() < 0).any() or not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
            raise ValueError("soft assignment rows must be probability vectors")
    K = p.shape[1]
    if K == 1:
        return p.new_zeros(())
    p_bar = p.mean(0)
    entropy = -torch.special.xlogy(p_bar, p_bar).sum()
    return (1.0 - entropy / math.log(K)).clamp(0.0, 1.0)


def perplexity(usage_histogram) -> float:
    """``exp`` of the entropy of the normalized usage histogram, in ``[1, K]``."""
    h = torch.as_tensor(usage_histogram, dtype=torch.float64)
    total = h.sum()
    if (h < 0).any() or not total > 0:
        raise ValueError("usage histogram must be non-negative with a positive sum")
    p = h / total
    entropy = -torch.special.xlogy(p, p).sum()
    return float(min(max(math.exp(float(entropy)), 1.0), float(h.numel())))


def dead_code_threshold(window_assignments: int, size: int, fraction: float = 0.01) -> float:
    return max(1.0, fraction * window_assignments / size)


@torch.no_grad()
def reinit_dead_codes(book: Codebook, encoder_sample: torch.Tensor, threshold: float,
                      generator: torch.Generator | None = None, sample_size: int = 8) -> int:
    """Move every code used fewer than ``threshold`` times onto fresh encoder statistics.

    Each dead code becomes the mean of ``sample_size`` rows drawn without
    replacement from ``encoder_sample``; its usage count restarts at zero.
    Returns the number of codes replaced.
    """
    sample = encoder_sample.detach()
    if sample.ndim != 2 or sample.shape[1] != book.dim:
        raise ValueError(f"encoder sample must be M x {book.dim}")
    if sample.shape[0] < sample_size:
        raise ValueError(f"need at least {sample_size} encoder rows, got {sample.shape[0]}")
    dead = torch.nonzero(book.usage_counts < threshold).flatten().tolist()
    for j in dead:
        pick = torch.randperm(sample.shape[0], generator=generator)[:sample_size]
        book.weight[j] = sample[pick].mean(0).to(book.weight.dtype)
        book.usage_counts[j] = 0
    return len(dead)


def with_forced(outcome: QuantizeOutcome, book: Codebook, forced_indices: torch.Tensor,
                forced_mask: torch.Tensor) -> QuantizeOutcome:
    """Outcome with masked rows overridden by ``forced_indices`` and VQ losses recomputed."""
    indices = torch.where(forced_mask, forced_indices, outcome.indices)
    snapped = book.weight.detach()[indices]
    z_q = torch.where(forced_mask[:, None], snapped, outcome.z_q)
    selected = book.weight[indices]
    z_e = outcome.z_e
    return replace(
        outcome,
        indices=indices,
        z_q=z_q,
        loss_codebook=F.mse_loss(selected, z_e.detach()),
        loss_commit=F.mse_loss(z_e, selected.detach()),
        perplexity=_batch_perplexity(indices, book.size),
        forced_mask=outcome.forced_mask | forced_mask,
    )
