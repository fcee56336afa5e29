"""Shared discrete codebook: nearest-neighbor quantization, straight-through
gradients, the two vector-quantization loss terms, and soft code posteriors.

Both the vision-dynamics branch and the motion branch quantize into one
codebook, so everything here is written for latent tensors of shape
``(..., n, f)`` where ``n`` is the number of code slots per sample and ``f``
the code dimension.
"""

from __future__ import annotations

import torch
from torch import nn

TIE_BREAK_RULE = "lowest-index-v1"

# rows per distance-matrix chunk; bounds peak memory at rows*d*f floats
_QUANTIZE_CHUNK = 4096


def _check_latents(z: torch.Tensor, code_dim: int, name: str = "latents") -> None:
    if z.ndim < 2 or z.shape[-1] != code_dim:
        raise ValueError(
            f"{name} must have shape (..., n, {code_dim}), got {tuple(z.shape)}"
        )
    if not torch.isfinite(z).all():
        bad = (~torch.isfinite(z)).sum().item()
        raise ValueError(f"{name} contain {bad} non-finite values")


def nearest_code(z: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook entry per row, lowest index on ties.

    Distances are computed from explicit differences (not the expanded
    quadratic form) so exact ties stay exact in floating point.
    """
    _check_latents(z, entries.shape[-1])
    d = entries.shape[0]
    flat = z.reshape(-1, entries.shape[-1])
    pieces = []
    arange = torch.arange(d, device=z.device)
    for start in range(0, flat.shape[0], _QUANTIZE_CHUNK):
        chunk = flat[start:start + _QUANTIZE_CHUNK]
        dist = (chunk.unsqueeze(1) - entries.unsqueeze(0)).pow(2).sum(-1)  # (rows, d)
        min_val = dist.min(dim=1, keepdim=True).values
        # lowest index among exact minima
        candidates = torch.where(dist == min_val, arange, torch.full_like(arange, d))
        pieces.append(candidates.min(dim=1).values)
    return torch.cat(pieces).reshape(z.shape[:-1])


def quantize(z: torch.Tensor, entries: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-neighbor lookup: returns (indices, quantized latents).

    The quantized output is a differentiable gather from ``entries`` so the
    quantization loss term can move the selected codes; the index search
    itself runs without gradients.
    """
    with torch.no_grad():
        indices = nearest_code(z, entries)
    return indices, entries[indices]


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; gradients pass to ``z`` as if through identity.

    The quantized side is detached, so downstream reconstruction losses reach
    the encoder only; codebook entries are trained by the quantization term.
    """
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return z + (z_q - z).detach()


def vq_terms(z: torch.Tensor, z_q: torch.Tensor, beta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Quantization and commitment terms, each beta * squared distance.

    The squared distance is summed over the code slots and features of one
    sample and averaged over any leading batch dimensions.  The quantization
    term stops gradients on the encoder side (it trains the codebook); the
    commitment term stops them on the codebook side (it trains the encoder).
    """
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    sq_quant = (z.detach() - z_q).pow(2).sum(dim=(-2, -1))
    sq_commit = (z - z_q.detach()).pow(2).sum(dim=(-2, -1))
    return beta * sq_quant.mean(), beta * sq_commit.mean()


def code_posterior(z: torch.Tensor, entries: torch.Tensor, temperature: float) -> torch.Tensor:
    """Soft assignment over codes: softmax of negative squared distance / temperature.

    Rows are valid distributions; as temperature -> 0 the argmax recovers the
    hard nearest-neighbor assignment.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    _check_latents(z, entries.shape[-1])
    dist = (z.unsqueeze(-2) - entries).pow(2).sum(-1)  # (..., n, d)
    return torch.softmax(-dist / temperature, dim=-1)


def usage_histogram(history, num_codes: int) -> torch.Tensor:
    """Count vector over codes from a history of index sequences."""
    counts = torch.zeros(num_codes, dtype=torch.long)
    for seq in history:
        idx = torch.as_tensor(seq, dtype=torch.long).reshape(-1)
        if idx.numel() == 0:
            continue
        if idx.max() >= num_codes or idx.min() < 0:
            raise ValueError(f"index out of range for codebook of size {num_codes}")
        counts += torch.bincount(idx, minlength=num_codes)
    return counts


def usage_entropy(counts: torch.Tensor) -> float:
    """Shannon entropy (nats) of the normalized usage histogram."""
    total = counts.sum().item()
    if total == 0:
        return 0.0
    p = counts.double() / total
    p = p[p > 0]
    return float(-(p * p.log()).sum())


class SharedCodebook(nn.Module):
    """Learnable d x f code table shared by both encoder branches.

    Entries are plain trainable parameters; the only gradient path into them
    is the quantization loss term (no moving-average update).  Optional dead
    code revival reinitializes codes unused over a trailing sample window to
    encoder outputs drawn from the current batch (off by default).
    """

    def __init__(self, num_codes: int, code_dim: int, beta: float = 0.25,
                 temperature: float = 1.0, revival: bool = False,
                 revival_window: int = 10_000):
        super().__init__()
        if num_codes < 2 or code_dim < 1:
            raise ValueError("need num_codes >= 2 and code_dim >= 1")
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.beta = beta
        self.temperature = temperature
        self.revival = revival
        self.revival_window = revival_window
        entries = torch.empty(num_codes, code_dim).uniform_(-1.0 / num_codes, 1.0 / num_codes)
        self.entries = nn.Parameter(entries)
        self.register_buffer("window_counts", torch.zeros(num_codes, dtype=torch.long))
        self.register_buffer("window_samples", torch.zeros((), dtype=torch.long))

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return quantize(z, self.entries)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return self.entries[indices]

    def posterior(self, z: torch.Tensor, temperature: float | None = None) -> torch.Tensor:
        return code_posterior(z, self.entries, self.temperature if temperature is None else temperature)

    def vq_terms(self, z: torch.Tensor, z_q: torch.Tensor,
                 beta: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        return vq_terms(z, z_q, self.beta if beta is None else beta)

    def observe(self, indices: torch.Tensor, batch_latents: torch.Tensor | None = None) -> int:
        """Track code usage; with revival enabled, reset dead codes.

        Returns the number of revived codes (always 0 when revival is off).
        """
        flat = indices.reshape(-1)
        self.window_counts += torch.bincount(flat, minlength=self.num_codes)
        self.window_samples += flat.numel()
        if self.window_samples.item() < self.revival_window:
            return 0
        revived = 0
        if self.revival and batch_latents is not None:
            dead = (self.window_counts == 0).nonzero(as_tuple=True)[0]
            if dead.numel() > 0:
                pool = batch_latents.detach().reshape(-1, self.code_dim)
                pick = torch.randint(pool.shape[0], (dead.numel(),), device=pool.device)
                with torch.no_grad():
                    self.entries[dead] = pool[pick]
                revived = int(dead.numel())
        self.window_counts.zero_()
        self.window_samples.zero_()
        return revived
