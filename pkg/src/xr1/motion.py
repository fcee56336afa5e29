"""Motion branch: encode action chunks plus proprioception into discrete codes
and reconstruct the chunk conditioned on code, instruction, and observation.

The encoder sees only motor data (no images, no language, by signature) and is
causal along time: a perturbation at step t cannot change features at earlier
positions before the final query pooling.  Action dimensionality differences
across embodiments are reconciled by fixed-width padding with boolean masks
and per-embodiment linear adapters in front of the shared trunk.
"""

from __future__ import annotations

import torch
from torch import nn

from .codebook import vq_terms
from .flows import FlowHead, flow_matching_loss, integrate_flow
from .language import PAD_ID, vocab_size
from .vision import QueryPool, _conv_block


def validate_chunk(values: torch.Tensor, mask: torch.Tensor, horizon: int,
                   name: str = "chunk") -> None:
    """(B, h, D) values with (B, D) valid-dim mask; padded columns must be zero."""
    if values.ndim != 3 or values.shape[1] != horizon:
        raise ValueError(f"{name}: expected (B, {horizon}, D), got {tuple(values.shape)}")
    if mask.shape != (values.shape[0], values.shape[2]):
        raise ValueError(f"{name}: mask shape {tuple(mask.shape)} does not match values")
    if not torch.isfinite(values).all():
        raise ValueError(f"{name}: non-finite values")
    padded = values.masked_select(~mask.unsqueeze(1).expand_as(values).bool())
    if padded.numel() and padded.abs().max().item() != 0.0:
        raise ValueError(f"{name}: masked-out columns must be zero")


class CausalConv1d(nn.Module):
    """Strided 1D convolution with left-only padding: output position p
    depends on input positions <= stride * p."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.left_pad = kernel - 1
        self.conv = nn.Conv1d(cin, cout, kernel, stride=stride)
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.pad(x, (self.left_pad, 0)))


class MotionEncoder(nn.Module):
    """(actions, proprio) chunk -> n latent code vectors of dimension code_dim."""

    def __init__(self, horizon: int, action_dim: int, proprio_dim: int,
                 embodiments: list[str], base_channels: int, n_codes: int, code_dim: int):
        super().__init__()
        self.horizon = horizon
        self.action_dim = action_dim
        self.proprio_dim = proprio_dim
        self.embodiment_index = {name: i for i, name in enumerate(embodiments)}
        feat = action_dim + proprio_dim
        self.adapters = nn.ModuleList(nn.Linear(feat, base_channels) for _ in embodiments)
        self.conv1 = CausalConv1d(base_channels, 2 * base_channels, stride=2)
        self.conv2 = CausalConv1d(2 * base_channels, 2 * base_channels, stride=1)
        self.norm1 = nn.LayerNorm(2 * base_channels)
        self.norm2 = nn.LayerNorm(2 * base_channels)
        self.act = nn.SiLU()
        pooled_len = (horizon - 1) // 2 + 1
        self.time_stride = 2
        self.pool = QueryPool(2 * base_channels, n_codes, pooled_len)
        self.out_proj = nn.Linear(2 * base_channels, code_dim)

    def _adapt(self, actions: torch.Tensor, proprio: torch.Tensor,
               embodiment_idx: torch.Tensor) -> torch.Tensor:
        x = torch.cat([actions, proprio], dim=-1)  # (B, h, A+S)
        out = torch.zeros(x.shape[0], x.shape[1], self.adapters[0].out_features,
                          dtype=x.dtype, device=x.device)
        for i in embodiment_idx.unique().tolist():
            rows = embodiment_idx == i
            out[rows] = self.adapters[i](x[rows])
        return out

    def features_before_pooling(self, actions: torch.Tensor, proprio: torch.Tensor,
                                embodiment_idx: torch.Tensor) -> torch.Tensor:
        """Causal trunk features (B, T', C); position p covers inputs <= 2p."""
        h = self._adapt(actions, proprio, embodiment_idx).transpose(1, 2)  # (B, C, h)
        h = self.conv1(h).transpose(1, 2)
        h = self.act(self.norm1(h)).transpose(1, 2)
        h = self.conv2(h).transpose(1, 2)
        return self.act(self.norm2(h))

    def forward(self, actions: torch.Tensor, proprio: torch.Tensor,
                embodiment_idx: torch.Tensor) -> torch.Tensor:
        tokens = self.features_before_pooling(actions, proprio, embodiment_idx)
        return self.out_proj(self.pool(tokens))


class ObsPool(nn.Module):
    """Pooled visual features plus proprioception for decoder conditioning."""

    def __init__(self, proprio_dim: int, out_dim: int = 48):
        super().__init__()
        self.frame_net = nn.Sequential(_conv_block(3, 8, 2), _conv_block(8, 16, 2))
        self.frame_proj = nn.Linear(16, out_dim - 16)
        self.proprio_proj = nn.Linear(proprio_dim, 16)

    def forward(self, frames: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        b, k = frames.shape[:2]
        feats = self.frame_net(frames.flatten(0, 1)).mean(dim=(-2, -1))  # (B*K, 16)
        pooled = self.frame_proj(feats.reshape(b, k, -1).mean(dim=1))
        return torch.cat([pooled, self.proprio_proj(proprio)], dim=-1)


class MotionDecoder(nn.Module):
    """Reconstruct an action chunk from quantized motion codes, instruction,
    and observation.

    Default reconstruction objective is flow matching; a plain L1 regression
    head is available via ``mode='l1'`` (see the stage-1 trainer docs for the
    switch).
    """

    def __init__(self, horizon: int, action_dim: int, proprio_dim: int,
                 n_codes: int, code_dim: int, cond_dim: int = 64, flow_hidden: int = 128):
        super().__init__()
        self.horizon = horizon
        self.action_dim = action_dim
        self.obs_pool = ObsPool(proprio_dim)
        self.instr_embed = nn.Embedding(vocab_size(), 16, padding_idx=PAD_ID)
        self.code_proj = nn.Linear(n_codes * code_dim, 64)
        self.cond_net = nn.Sequential(nn.Linear(48 + 16 + 64, cond_dim), nn.SiLU())
        self.flow_head = FlowHead(horizon, action_dim, cond_dim, hidden=flow_hidden)
        self.direct_head = nn.Sequential(
            nn.Linear(cond_dim, 2 * cond_dim), nn.SiLU(),
            nn.Linear(2 * cond_dim, horizon * action_dim),
        )

    def condition(self, z_mo_q: torch.Tensor, instr_ids: torch.Tensor,
                  frames: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        emb = self.instr_embed(instr_ids)
        counts = (instr_ids != PAD_ID).sum(dim=1, keepdim=True).clamp_min(1)
        instr = emb.sum(dim=1) / counts
        obs = self.obs_pool(frames, proprio)
        codes = self.code_proj(z_mo_q.flatten(1))
        return self.cond_net(torch.cat([obs, instr, codes], dim=-1))

    def reconstruction_loss(self, z_mo_q: torch.Tensor, instr_ids: torch.Tensor,
                            frames: torch.Tensor, proprio: torch.Tensor,
                            target: torch.Tensor, valid_mask: torch.Tensor,
                            mode: str = "flow",
                            generator: torch.Generator | None = None) -> torch.Tensor:
        if target is None:
            raise ValueError("training mode requires a target action chunk")
        cond = self.condition(z_mo_q, instr_ids, frames, proprio)
        if mode == "flow":
            return flow_matching_loss(self.flow_head, cond, target, valid_mask, generator)
        if mode == "l1":
            pred = self.direct_head(cond).reshape(target.shape)
            mask = valid_mask.unsqueeze(1).to(pred.dtype).expand_as(pred)
            return ((pred - target).abs() * mask).sum() / mask.sum().clamp_min(1.0)
        raise ValueError(f"unknown reconstruction mode {mode!r}")

    @torch.no_grad()
    def sample(self, z_mo_q: torch.Tensor, instr_ids: torch.Tensor,
               frames: torch.Tensor, proprio: torch.Tensor, valid_mask: torch.Tensor,
               steps: int = 10, generator: torch.Generator | None = None) -> torch.Tensor:
        cond = self.condition(z_mo_q, instr_ids, frames, proprio)
        chunk = integrate_flow(self.flow_head, cond, self.horizon, self.action_dim,
                               steps, generator)
        return chunk * valid_mask.unsqueeze(1).to(chunk.dtype)


def motion_loss(recon: torch.Tensor, z: torch.Tensor, z_q: torch.Tensor,
                beta: float) -> dict[str, torch.Tensor]:
    """Action reconstruction plus the two VQ terms (same structure as the
    vision loss, with the generative reconstruction term in place of pixel L1)."""
    quant, commit = vq_terms(z, z_q, beta)
    return {
        "recon": recon,
        "quant": quant,
        "commit": commit,
        "total": recon + quant + commit,
    }
