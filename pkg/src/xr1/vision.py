"""Vision-dynamics branch: encode the change between a frame pair into a few
discrete codes, and reconstruct the future frame from the current frame plus
those codes.

The encoder is deliberately much larger than the decoder (the informative
work should happen on the encoding side); the ratio is asserted when the
branch is built.  Frames are channels-first ``(B, 3, H, W)`` float tensors
in [0, 1].
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .codebook import straight_through, vq_terms


def validate_frames(frames: torch.Tensor, image_size: int, name: str = "frames") -> None:
    """Frames must be (..., 3, H, W) with H = W = image_size and values in [0, 1]."""
    if frames.ndim < 3 or frames.shape[-3:] != (3, image_size, image_size):
        raise ValueError(
            f"{name}: expected (..., 3, {image_size}, {image_size}), got {tuple(frames.shape)}"
        )
    if not torch.isfinite(frames).all():
        raise ValueError(f"{name}: non-finite pixel values")
    lo, hi = frames.min().item(), frames.max().item()
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name}: pixel values outside [0, 1] (min {lo:.4f}, max {hi:.4f})")


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    groups = max(g for g in (1, 2, 4) if cout % g == 0)
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.SiLU(),
    )


class QueryPool(nn.Module):
    """Compress a token grid into n learnable query slots via cross-attention."""

    def __init__(self, dim: int, n_queries: int, n_tokens: int, heads: int = 2):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.pos = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        kv = tokens + self.pos
        q = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        out = out + q
        return out + self.mlp(self.norm(out))


class VisionEncoder(nn.Module):
    """Frame pair -> n latent code vectors of dimension code_dim."""

    def __init__(self, image_size: int, base_channels: int, n_codes: int, code_dim: int):
        super().__init__()
        self.image_size = image_size
        n_down = max(1, int(math.log2(image_size // 4))) if image_size >= 8 else 1
        widths = [min(base_channels * (2 ** min(i, 2)), 4 * base_channels) for i in range(n_down)]
        blocks, cin = [], 6
        for w in widths:
            blocks.append(_conv_block(cin, w, stride=2))
            cin = w
        self.convs = nn.Sequential(*blocks)
        side = image_size // (2 ** n_down)
        self.pool = QueryPool(cin, n_codes, side * side)
        self.out_proj = nn.Linear(cin, code_dim)

    def forward(self, frame_t: torch.Tensor, frame_th: torch.Tensor) -> torch.Tensor:
        x = torch.cat([frame_t, frame_th], dim=1)
        feats = self.convs(x)
        tokens = feats.flatten(2).transpose(1, 2)  # (B, S*S, C)
        return self.out_proj(self.pool(tokens))


class VisionDecoder(nn.Module):
    """Current frame plus quantized codes -> future frame (raw, unclamped)."""

    def __init__(self, image_size: int, n_codes: int, code_dim: int):
        super().__init__()
        self.image_size = image_size
        self.frame_net = nn.Sequential(_conv_block(3, 6, 2), _conv_block(6, 12, 2))
        self.code_proj = nn.Linear(n_codes * code_dim, 12)
        self.merge = _conv_block(24, 12, 1)
        self.up1 = _conv_block(12, 6, 1)
        self.out = nn.Conv2d(6, 3, kernel_size=3, padding=1)

    def forward(self, frame_t: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
        feats = self.frame_net(frame_t)
        cond = self.code_proj(z_q.flatten(1))
        cond = cond.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, feats.shape[-2], feats.shape[-1])
        x = self.merge(torch.cat([feats, cond], dim=1))
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up1(x)
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.out(x)


class VisionBranch(nn.Module):
    """Encoder/decoder pair around the shared codebook for one camera view.

    Multi-view batches fold the view axis into the batch axis before calling;
    the same weights serve every view.
    """

    def __init__(self, image_size: int, base_channels: int, n_codes: int, code_dim: int,
                 min_encoder_ratio: float = 3.0):
        super().__init__()
        self.image_size = image_size
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.encoder = VisionEncoder(image_size, base_channels, n_codes, code_dim)
        self.decoder = VisionDecoder(image_size, n_codes, code_dim)
        enc = sum(p.numel() for p in self.encoder.parameters())
        dec = sum(p.numel() for p in self.decoder.parameters())
        self.encoder_params, self.decoder_params = enc, dec
        if enc < min_encoder_ratio * dec:
            raise ValueError(
                f"asymmetry budget violated: encoder has {enc} params, decoder {dec} "
                f"(need ratio >= {min_encoder_ratio})"
            )

    def encode_dynamics(self, frame_t: torch.Tensor, frame_th: torch.Tensor) -> torch.Tensor:
        validate_frames(frame_t, self.image_size, "frame_t")
        validate_frames(frame_th, self.image_size, "frame_th")
        return self.encoder(frame_t, frame_th)

    def decode_future(self, frame_t: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
        """Inference-mode prediction, clamped to valid pixel range."""
        validate_frames(frame_t, self.image_size, "frame_t")
        if z_q.shape[-2:] != (self.n_codes, self.code_dim):
            raise ValueError(
                f"latent shape {tuple(z_q.shape)} does not match "
                f"({self.n_codes}, {self.code_dim})"
            )
        return self.decoder(frame_t, z_q).clamp(0.0, 1.0)


def vision_loss(pred: torch.Tensor, target: torch.Tensor, z: torch.Tensor,
                z_q: torch.Tensor, beta: float) -> dict[str, torch.Tensor]:
    """Future-frame loss: mean-L1 reconstruction plus the two VQ terms.

    The prediction enters unclamped so saturation cannot kill gradients; the
    total is the plain unweighted sum of the three components.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    recon = (pred - target).abs().mean()
    quant, commit = vq_terms(z, z_q, beta)
    return {
        "recon": recon,
        "quant": quant,
        "commit": commit,
        "total": recon + quant + commit,
    }


__all__ = [
    "VisionBranch",
    "VisionEncoder",
    "VisionDecoder",
    "QueryPool",
    "validate_frames",
    "vision_loss",
    "straight_through",
]
