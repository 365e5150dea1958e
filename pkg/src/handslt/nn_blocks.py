"""Neural building blocks shared by every encoder in the package.

Rotary position embedding, local (windowed) multi-head attention, low-rank
adapters, linear+GELU mappers and masked mean pooling.  Every block works in
any floating dtype, so the gradient tests can run them in float64.

Masks follow one convention throughout: a boolean tensor where ``True``
marks a *valid* (non-padding) position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from handslt.errors import ConfigurationError, EmptyPoolError, ShapeError

ROPE_BASE = 10000.0


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form; the tanh approximation is deliberately not used
    return F.gelu(x)


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


def rope_angles(positions: torch.Tensor, head_dim: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotation angles ``position * base**(-2i/head_dim)``, shape ``(L, head_dim/2)``.

    Computed in float64 so large positions keep full precision.
    """
    if head_dim % 2:
        raise ConfigurationError(f"RoPE needs an even head_dim, got {head_dim}")
    i = torch.arange(head_dim // 2, dtype=torch.float64, device=positions.device)
    inv_freq = base ** (-2.0 * i / head_dim)
    return positions.to(torch.float64)[..., None] * inv_freq


def rope_apply(x: torch.Tensor, positions, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate each consecutive pair ``(x[2i], x[2i+1])`` by ``position * theta_i``.

    Args:
        x: ``(..., L, head_dim)`` per-head features.
        positions: ``L`` non-negative integer positions aligned with the
            second-to-last axis of ``x``.
        base: frequency base.

    Returns:
        Tensor with the same shape and dtype as ``x``.
    """
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise ConfigurationError(f"RoPE needs an even head_dim, got {head_dim}")
    positions = torch.as_tensor(positions, device=x.device)
    if positions.dim() != 1 or positions.shape[0] != x.shape[-2]:
        raise ShapeError(f"positions {tuple(positions.shape)} do not align with x {tuple(x.shape)}")
    angles = rope_angles(positions, head_dim, base)
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return rotated.flatten(-2)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    head_dim: int
    window_size: int | None = 7  # None means unrestricted
    use_rope: bool = True
    causal: bool = False

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigurationError("num_heads and head_dim must be positive")
        if self.window_size is not None and (self.window_size < 1 or self.window_size % 2 == 0):
            raise ConfigurationError(f"window_size must be a positive odd integer, got {self.window_size}")
        if self.use_rope and self.head_dim % 2:
            raise ConfigurationError(f"RoPE needs an even head_dim, got {self.head_dim}")

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def half_window(self) -> int | None:
        return None if self.window_size is None else (self.window_size - 1) // 2


def allowed_positions(
    q_len: int,
    k_len: int,
    cfg: AttentionConfig,
    mask: torch.Tensor | None = None,
    device=None,
) -> torch.Tensor:
    """Boolean ``(B|1, 1, q_len, k_len)`` matrix of query->key pairs that may attend."""
    i = torch.arange(q_len, device=device)[:, None]
    j = torch.arange(k_len, device=device)[None, :]
    allowed = torch.ones(q_len, k_len, dtype=torch.bool, device=device)
    if cfg.half_window is not None:
        allowed &= (i - j).abs() <= cfg.half_window
    if cfg.causal:
        allowed &= j <= i
    allowed = allowed[None, None]
    if mask is not None:
        allowed = allowed & mask[:, None, None, :].bool()
    return allowed


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, num_heads, d // num_heads).transpose(1, 2)


def local_window_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    cfg: AttentionConfig,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention restricted to a temporal window.

    ``q`` is ``(B, Lq, H*Dh)``; ``k`` and ``v`` are ``(B, Lk, H*Dh)``.  ``mask``
    is an optional ``(B, Lk)`` validity mask over keys.  Weights to keys
    outside the window (``|i-j| > (window-1)/2``) or to masked keys are exactly
    zero; each query row with at least one allowed key sums to one.  Queries
    with no allowed key produce zeros.
    """
    unbatched = q.dim() == 2
    if unbatched:
        q, k, v = q[None], k[None], v[None]
        mask = None if mask is None else mask[None]
    if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
        raise ShapeError(f"q/k/v batch or length mismatch: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1] == cfg.model_dim):
        raise ShapeError(f"feature dims must equal num_heads*head_dim = {cfg.model_dim}")
    if cfg.window_size is not None and q.shape[1] != k.shape[1]:
        raise ShapeError("windowed attention needs equal query and key lengths")
    if mask is not None and mask.shape != k.shape[:2]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match keys {tuple(k.shape[:2])}")

    qh, kh, vh = (_split_heads(t, cfg.num_heads) for t in (q, k, v))
    if cfg.use_rope:
        qh = rope_apply(qh, torch.arange(qh.shape[2], device=q.device))
        kh = rope_apply(kh, torch.arange(kh.shape[2], device=k.device))

    scores = qh @ kh.transpose(-1, -2) / math.sqrt(cfg.head_dim)
    allowed = allowed_positions(q.shape[1], k.shape[1], cfg, mask, device=q.device)
    scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1) * allowed
    out = (weights @ vh).transpose(1, 2).reshape(q.shape[0], q.shape[1], -1)
    if unbatched:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    """Projected multi-head attention (self or cross) over :func:`local_window_attention`."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: int | None = None,
        use_rope: bool = False,
        causal: bool = False,
        kv_dim: int | None = None,
    ):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} is not divisible by num_heads {num_heads}")
        self.cfg = AttentionConfig(num_heads, dim // num_heads, window_size, use_rope, causal)
        kv_dim = kv_dim or dim
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None, context=None, context_mask=None):
        src = x if context is None else context
        key_mask = mask if context is None else context_mask
        out = local_window_attention(
            self.q_proj(x), self.k_proj(src), self.v_proj(src), self.cfg, mask=key_mask
        )
        return self.out_proj(out)


class TransformerLayer(nn.Module):
    """Pre-norm residual block: self-attention, optional cross-attention, GELU MLP."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        ffn_dim: int,
        window_size: int | None = None,
        use_rope: bool = False,
        causal: bool = False,
        cross_attention: bool = False,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads, window_size, use_rope, causal)
        self.cross_attn = None
        if cross_attention:
            self.norm_cross = nn.LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None, context=None, context_mask=None):
        x = x + self.dropout(self.self_attn(self.norm1(x), mask=mask))
        if self.cross_attn is not None:
            x = x + self.dropout(
                self.cross_attn(self.norm_cross(x), context=context, context_mask=context_mask)
            )
        x = x + self.dropout(self.fc2(self.dropout(gelu(self.fc1(self.norm2(x))))))
        return x


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    angle = pos / (10000.0 ** (i / dim))
    table = torch.zeros(length, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = angle.sin()
    table[:, 1::2] = angle.cos()[:, : dim // 2]
    return table.to(dtype)


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowRankAdapterConfig:
    rank: int = 4
    alpha: float = 4.0
    dropout: float = 0.1
    target_projections: frozenset[str] = field(default_factory=lambda: frozenset({"q_proj", "v_proj"}))

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError(f"rank must be positive, got {self.rank}")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigurationError(f"alpha must be finite and positive, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def low_rank_adapt(
    base_output: torch.Tensor,
    x: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    cfg: LowRankAdapterConfig,
    training: bool = False,
) -> torch.Tensor:
    """``base_output + (alpha/rank) * B A dropout(x)``; dropout only on the adapter path."""
    if A.shape[0] != cfg.rank or B.shape[1] != cfg.rank:
        raise ConfigurationError(
            f"adapter rank mismatch: A {tuple(A.shape)}, B {tuple(B.shape)}, rank {cfg.rank}"
        )
    h = F.dropout(x, cfg.dropout, training) if cfg.dropout > 0 else x
    return base_output + cfg.scale * ((h @ A.T) @ B.T)


class LoRALinear(nn.Module):
    """A frozen-or-trainable ``nn.Linear`` plus a zero-initialised low-rank update."""

    def __init__(self, base: nn.Linear, cfg: LowRankAdapterConfig):
        super().__init__()
        if cfg.rank > min(base.in_features, base.out_features):
            raise ConfigurationError(
                f"rank {cfg.rank} exceeds min(in, out) = {min(base.in_features, base.out_features)}"
            )
        self.base = base
        self.cfg = cfg
        self.lora_A = nn.Parameter(torch.empty(cfg.rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, cfg.rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x):
        return low_rank_adapt(self.base(x), x, self.lora_A, self.lora_B, self.cfg, self.training)


def inject_lora(module: nn.Module, cfg: LowRankAdapterConfig) -> int:
    """Wrap every ``nn.Linear`` child named in ``cfg.target_projections``; returns the count."""
    count = 0
    for parent in list(module.modules()):
        for name, child in list(parent.named_children()):
            if name in cfg.target_projections and isinstance(child, nn.Linear):
                setattr(parent, name, LoRALinear(child, cfg))
                count += 1
    return count


# ---------------------------------------------------------------------------
# mappers and pooling
# ---------------------------------------------------------------------------


class MapperBlock(nn.Module):
    """Linear layer followed by GELU."""

    def __init__(self, input_dim: int, output_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.linear = nn.Linear(input_dim, output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"mapper expects last dim {self.input_dim}, got {x.shape[-1]}")
        return gelu(self.linear(x))


def mapper_forward(m: MapperBlock, x: torch.Tensor) -> torch.Tensor:
    return m(x)


def masked_mean_pool(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of ``x`` (``(..., L, D)``) over the positions where ``mask`` is True."""
    if mask is None:
        if x.shape[-2] == 0:
            raise EmptyPoolError("cannot pool an empty sequence")
        return x.mean(dim=-2)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match features {tuple(x.shape)}")
    mask = mask.bool()
    counts = mask.sum(dim=-1, keepdim=True)
    if (counts == 0).any():
        raise EmptyPoolError("at least one sequence has no valid positions")
    total = torch.where(mask[..., None], x, torch.zeros((), dtype=x.dtype, device=x.device)).sum(dim=-2)
    return total / counts.to(x.dtype)
