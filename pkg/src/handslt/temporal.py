"""Spatio-temporal encoder over fused frame features."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from handslt.errors import ConfigurationError, ShapeError
from handslt.nn_blocks import TransformerLayer


@dataclass(frozen=True)
class TemporalConfig:
    input_dim: int = 256
    num_layers: int = 4
    hidden_dim: int = 256
    num_heads: int = 8
    ffn_dim: int = 1024
    window_size: int = 7
    downsample_after_layer: int = 2
    downsample_factor: int = 2
    rope_all_layers: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if not 0 <= self.downsample_after_layer < self.num_layers:
            raise ConfigurationError("downsample_after_layer must be in [0, num_layers)")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError("hidden_dim must be divisible by num_heads")
        if self.downsample_factor < 1:
            raise ConfigurationError("downsample_factor must be >= 1")


def downsampled_length(length: int, factor: int) -> int:
    return -(-length // factor)


def temporal_downsample(x: torch.Tensor, mask: torch.Tensor, factor: int):
    """Mean-pool non-overlapping groups of ``factor`` steps, valid steps only.

    ``x`` is ``(B, L, D)``.  The trailing partial group is pooled as-is; a
    pooled step is valid if any of its inputs was.
    """
    if factor == 1:
        return x, mask
    b, n, d = x.shape
    out_len = downsampled_length(n, factor)
    pad = out_len * factor - n
    if pad:
        x = torch.cat([x, x.new_zeros(b, pad, d)], dim=1)
        mask = torch.cat([mask, mask.new_zeros(b, pad)], dim=1)
    m = mask.view(b, out_len, factor).to(x.dtype)
    total = (x.view(b, out_len, factor, d) * m[..., None]).sum(dim=2)
    count = m.sum(dim=2)
    pooled = total / count.clamp(min=1.0)[..., None]
    return pooled, count > 0


class TemporalEncoder(nn.Module):
    """Input projection, windowed RoPE layers, downsampling, more windowed layers."""

    def __init__(self, cfg: TemporalConfig = TemporalConfig()):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.input_dim, cfg.hidden_dim)
        self.layers = nn.ModuleList(
            TransformerLayer(
                cfg.hidden_dim,
                cfg.num_heads,
                cfg.ffn_dim,
                window_size=cfg.window_size,
                use_rope=cfg.rope_all_layers or i < cfg.downsample_after_layer,
                dropout=cfg.dropout,
            )
            for i in range(cfg.num_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, f_hat: torch.Tensor, mask: torch.Tensor | None = None):
        """Returns ``(z, z_mask)`` with ``z`` of shape ``(B, ceil(L/factor), hidden_dim)``."""
        if f_hat.dim() != 3 or f_hat.shape[1] == 0:
            raise ShapeError(f"expected non-empty (B, L, D) input, got {tuple(f_hat.shape)}")
        if f_hat.shape[-1] != self.cfg.input_dim:
            raise ShapeError(f"expected input dim {self.cfg.input_dim}, got {f_hat.shape[-1]}")
        if mask is None:
            mask = torch.ones(f_hat.shape[:2], dtype=torch.bool, device=f_hat.device)
        x = self.in_proj(f_hat)
        for i, layer in enumerate(self.layers):
            if i == self.cfg.downsample_after_layer:
                x, mask = temporal_downsample(x, mask, self.cfg.downsample_factor)
            x = layer(x, mask=mask)
        return self.norm(x), mask


def encode_temporal(f_hat, encoder: TemporalEncoder, mask=None):
    return encoder(f_hat, mask)
