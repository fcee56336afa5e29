"""Flow-matching objective and Euler sampler for action-chunk generation.

The velocity field is trained on straight paths from noise to data:
``x_t = t * a + (1 - t) * eps`` with regression target ``a - eps``.  Sampling
integrates the learned field from pure noise at t=0 to an action chunk at t=1.
Used both by the motion-branch decoder and the policy action head.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class FlowHead(nn.Module):
    """MLP velocity field over flattened action chunks.

    Inputs: noisy chunk (B, h, A), per-sample time in [0, 1], condition
    vector (B, C).  Time enters through fixed Fourier features.
    """

    TIME_FEATURES = 8  # sin/cos pairs

    def __init__(self, horizon: int, action_dim: int, cond_dim: int, hidden: int = 128):
        super().__init__()
        self.horizon = horizon
        self.action_dim = action_dim
        flat = horizon * action_dim
        time_dim = 2 * self.TIME_FEATURES
        self.net = nn.Sequential(
            nn.Linear(flat + cond_dim + time_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, flat),
        )
        freqs = torch.tensor([2 * math.pi * (2 ** k) for k in range(self.TIME_FEATURES)])
        self.register_buffer("freqs", freqs)

    def _time_features(self, t: torch.Tensor) -> torch.Tensor:
        ang = t.reshape(-1, 1) * self.freqs
        return torch.cat([ang.sin(), ang.cos()], dim=-1)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x_t.shape[1:] != (self.horizon, self.action_dim):
            raise ValueError(
                f"expected chunks of shape (B, {self.horizon}, {self.action_dim}), "
                f"got {tuple(x_t.shape)}"
            )
        flat = x_t.reshape(x_t.shape[0], -1)
        feats = torch.cat([flat, cond, self._time_features(t)], dim=-1)
        return self.net(feats).reshape(x_t.shape)


def flow_matching_loss(head: nn.Module, cond: torch.Tensor, target: torch.Tensor,
                       valid_mask: torch.Tensor,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Velocity regression loss on one batch of normalized action chunks.

    target: (B, h, A) in [-1, 1]; valid_mask: (B, A) boolean, padded action
    dims are excluded from the mean.  Raises if the target is out of the
    normalized range (beyond +-1.5), which indicates missing normalization.
    """
    if target.abs().max().item() > 1.5:
        raise ValueError(
            "flow-matching target out of range: actions must be normalized to [-1, 1], "
            f"got max abs {target.abs().max().item():.3f}"
        )
    batch = target.shape[0]
    device = target.device
    t = torch.rand(batch, generator=generator, device=device, dtype=target.dtype)
    eps = torch.empty_like(target).normal_(generator=generator)
    x_t = t.view(-1, 1, 1) * target + (1 - t.view(-1, 1, 1)) * eps
    pred = head(x_t, t, cond)
    err = (pred - (target - eps)).pow(2)
    mask = valid_mask.unsqueeze(1).to(err.dtype).expand_as(err)
    denom = mask.sum().clamp_min(1.0)
    return (err * mask).sum() / denom


@torch.no_grad()
def integrate_flow(head: nn.Module, cond: torch.Tensor, horizon: int, action_dim: int,
                   steps: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Fixed-step Euler integration of the velocity field from noise at t=0."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    batch = cond.shape[0]
    x = torch.empty(batch, horizon, action_dim, device=cond.device).normal_(generator=generator)
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((batch,), k * dt, device=cond.device)
        x = x + dt * head(x, t, cond)
    return x
