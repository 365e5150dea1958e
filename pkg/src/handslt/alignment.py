"""Description-space projection, frozen text encoders and the contrastive objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from handslt.errors import (
    ConfigurationError,
    NumericDomainError,
    ShapeError,
    TrainingDivergenceError,
)
from handslt.nn_blocks import MapperBlock, TransformerLayer, masked_mean_pool, sinusoidal_positions

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0


class DescriptionProjector(nn.Module):
    """Two-stage projection of temporal features into the description space."""

    def __init__(self, temporal_dim: int, description_dim: int):
        super().__init__()
        self.mapper3 = MapperBlock(temporal_dim, description_dim)
        self.mapper4 = MapperBlock(description_dim, temporal_dim)

    def forward(self, z: torch.Tensor):
        return desc_project(z, self.mapper3, self.mapper4)


def desc_project(z: torch.Tensor, mapper3: MapperBlock, mapper4: MapperBlock):
    """Returns ``(z_star, z_hat)`` where ``z_hat = concat(mapper4(mapper3(z)), z)``."""
    d = z.shape[-1]
    if mapper3.input_dim != d or mapper4.input_dim != mapper3.output_dim or mapper4.output_dim != d:
        raise ConfigurationError(
            f"mapper dims {mapper3.input_dim}->{mapper3.output_dim}->{mapper4.output_dim} "
            f"incompatible with temporal dim {d}"
        )
    z_star = mapper3(z)
    return z_star, torch.cat([mapper4(z_star), z], dim=-1)


class FrozenTextEncoder(nn.Module):
    """Seeded transformer text encoder whose parameters never train."""

    def __init__(
        self,
        vocab_size: int,
        dim: int = 128,
        num_layers: int = 2,
        num_heads: int = 4,
        ffn_dim: int = 256,
        seed: int = 0,
        pad_id: int = 0,
    ):
        super().__init__()
        self.dim = dim
        self.pad_id = pad_id
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Embedding(vocab_size, dim)
            self.layers = nn.ModuleList(
                TransformerLayer(dim, num_heads, ffn_dim) for _ in range(num_layers)
            )
            self.norm = nn.LayerNorm(dim)
        self.requires_grad_(False)
        self.train(False)

    def train(self, mode: bool = True):
        # frozen: always behaves as in evaluation
        return super().train(False)

    @torch.no_grad()
    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is None:
            mask = ids != self.pad_id
        x = self.embed(ids) * math.sqrt(self.dim)
        x = x + sinusoidal_positions(ids.shape[1], self.dim, x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, mask=mask)
        return self.norm(x)


def encode_text_frozen(ids: torch.Tensor, encoder: FrozenTextEncoder, mask=None) -> torch.Tensor:
    return encoder(ids, mask)


class PoolBridge(nn.Module):
    """Masked mean pool followed by a linear bridge when dimensions differ."""

    def __init__(self, source_dim: int, common_dim: int):
        super().__init__()
        self.proj = nn.Linear(source_dim, common_dim) if source_dim != common_dim else None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return pool_and_bridge(x, mask, self.proj)


def pool_and_bridge(x: torch.Tensor, mask: torch.Tensor | None = None, proj: nn.Module | None = None):
    pooled = masked_mean_pool(x, mask)
    return pooled if proj is None else proj(pooled)


class LearnableTemperature(nn.Module):
    """Temperature stored as ``log tau`` and clamped to ``[tau_min, tau_max]``."""

    def __init__(self, init: float = TAU_INIT, tau_min: float = TAU_MIN, tau_max: float = TAU_MAX):
        super().__init__()
        if not 0 < tau_min <= init <= tau_max:
            raise ConfigurationError(f"need 0 < tau_min <= init <= tau_max, got {tau_min}, {init}, {tau_max}")
        self.log_min = math.log(tau_min)
        self.log_max = math.log(tau_max)
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    def forward(self) -> torch.Tensor:
        return self.log_tau.clamp(self.log_min, self.log_max).exp()

    @torch.no_grad()
    def clamp_(self) -> None:
        self.log_tau.clamp_(self.log_min, self.log_max)


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if (na <= eps).any() or (nb <= eps).any():
        raise NumericDomainError("cosine similarity is undefined for zero-norm embeddings")
    return (a / na) @ (b / nb).T


def symmetric_info_nce(left: torch.Tensor, right: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities; row ``j`` of each side is a matched pair."""
    if left.dim() != 2 or left.shape != right.shape or left.shape[0] < 1:
        raise ShapeError(f"need equal (B, D) embeddings with B >= 1, got {tuple(left.shape)}, {tuple(right.shape)}")
    logits = cosine_similarity_matrix(left, right) / temperature
    forward = torch.log_softmax(logits, dim=1).diagonal().sum()
    backward = torch.log_softmax(logits.T, dim=1).diagonal().sum()
    return -(forward + backward) / (2 * left.shape[0])


@dataclass
class ContrastiveBatch:
    left: torch.Tensor
    right: torch.Tensor
    temperature: float | torch.Tensor = 1.0

    def loss(self) -> torch.Tensor:
        return symmetric_info_nce(self.left, self.right, self.temperature)


@dataclass(frozen=True)
class LossWeights:
    lambda_align: float = 1.0
    lambda_desc: float = 0.5
    lambda_distill: float = 0.3

    def __post_init__(self):
        for name in ("lambda_align", "lambda_desc", "lambda_distill"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and non-negative, got {v}")

    @classmethod
    def from_triple(cls, distill: float, desc: float, align: float) -> "LossWeights":
        """Build from the ``(distill, desc, align)`` ordering used in ablation tables."""
        return cls(lambda_align=align, lambda_desc=desc, lambda_distill=distill)


def pretrain_loss(l_align, l_desc, l_distill, w: LossWeights):
    """Weighted sum of the three pre-training terms.

    Any term may be ``None`` (component switched off).  Returns
    ``(total, components)`` where ``components`` maps names to floats for
    logging.
    """
    terms = {"l_align": (l_align, w.lambda_align), "l_desc": (l_desc, w.lambda_desc),
             "l_distill": (l_distill, w.lambda_distill)}
    total = None
    components = {}
    for name, (value, weight) in terms.items():
        if value is None:
            continue
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergenceError(f"{name} is {v}", component=name)
        components[name] = v
        contrib = weight * value
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros(())
    elif not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total))
    components["total"] = float(total.detach())
    return total, components


class PretrainHeads(nn.Module):
    """Everything that exists only during pre-training: text encoders, bridges, temperatures."""

    def __init__(
        self,
        vocab_size: int,
        zhat_dim: int,
        llm_dim: int,
        text_dim: int = 128,
        common_dim: int = 128,
        text_layers: int = 2,
        text_heads: int = 4,
        text_ffn: int = 256,
        desc_seed: int = 1234,
        target_seed: int = 5678,
    ):
        super().__init__()
        self.desc_encoder = FrozenTextEncoder(vocab_size, text_dim, text_layers, text_heads, text_ffn, desc_seed)
        self.target_encoder = FrozenTextEncoder(vocab_size, text_dim, text_layers, text_heads, text_ffn, target_seed)
        self.video_desc_bridge = PoolBridge(zhat_dim, common_dim)
        self.desc_bridge = PoolBridge(text_dim, common_dim)
        self.video_target_bridge = PoolBridge(llm_dim, common_dim)
        self.target_bridge = PoolBridge(text_dim, common_dim)
        self.tau_desc = LearnableTemperature()
        self.tau_align = LearnableTemperature()

    def desc_loss(self, z_hat, z_mask, desc_ids, desc_mask):
        video = self.video_desc_bridge(z_hat, z_mask)
        text = self.desc_bridge(self.desc_encoder(desc_ids, desc_mask), desc_mask)
        return symmetric_info_nce(video, text, self.tau_desc())

    def align_loss(self, y, y_mask, target_ids, target_mask):
        video = self.video_target_bridge(y, y_mask)
        text = self.target_bridge(self.target_encoder(target_ids, target_mask), target_mask)
        return symmetric_info_nce(video, text, self.tau_align())

    def clamp_temperatures_(self) -> None:
        self.tau_desc.clamp_()
        self.tau_align.clamp_()
