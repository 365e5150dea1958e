"""Full sign-translation network and batch assembly."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from handslt.alignment import DescriptionProjector, PretrainHeads
from handslt.data import AugmentConfig, Sample, augment
from handslt.errors import ConfigurationError
from handslt.temporal import TemporalConfig, TemporalEncoder
from handslt.translator import PAD, LLMEncoder, TranslationDecoder, TranslatorConfig, Vocabulary
from handslt.visual import DistillationFusion, FrameEncoder, VisualConfig

CARRIED_OVER = ("visual", "distill", "temporal", "desc_proj", "llm_encoder")


@dataclass(frozen=True)
class ModelConfig:
    visual: VisualConfig = field(default_factory=VisualConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    description_dim: int = 128  # mapper3 output, equal to the description text width
    text_dim: int = 128
    text_layers: int = 2
    text_heads: int = 4
    text_ffn: int = 256
    common_dim: int = 128
    desc_text_seed: int = 1234
    target_text_seed: int = 5678
    distill_loss_kind: str = "abs"

    def __post_init__(self):
        d = self.visual.feature_dim
        if self.temporal.input_dim != 2 * d:
            raise ConfigurationError(f"temporal input must be 2*D = {2 * d}, got {self.temporal.input_dim}")
        if self.translator.input_dim != 2 * self.temporal.hidden_dim:
            raise ConfigurationError(
                f"translator input must be 2*temporal hidden = {2 * self.temporal.hidden_dim}"
            )
        if self.distill_loss_kind not in ("abs", "squared"):
            raise ConfigurationError(f"unknown distill_loss_kind {self.distill_loss_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        vis = dict(raw.pop("visual"))
        vis["frame_size"] = tuple(vis["frame_size"])
        return cls(
            visual=VisualConfig(**vis),
            temporal=TemporalConfig(**raw.pop("temporal")),
            translator=TranslatorConfig(**raw.pop("translator")),
            **raw,
        )


def model_preset(name: str, frame_size=None) -> ModelConfig:
    """Named dimension presets: ``default`` (desk scale), ``tiny`` (tests), ``paper-dims``."""
    if name == "default":
        cfg = ModelConfig()
    elif name == "tiny":
        cfg = ModelConfig(
            visual=VisualConfig(frame_size=(3, 32, 32), patch_size=16, width=32, depth=2, num_heads=2,
                                ffn_dim=64, feature_dim=32),
            temporal=TemporalConfig(input_dim=64, num_layers=2, hidden_dim=32, num_heads=4, ffn_dim=64,
                                    downsample_after_layer=1),
            translator=TranslatorConfig(input_dim=64, dim=32, encoder_layers=2, decoder_layers=2, num_heads=4,
                                        ffn_dim=64),
            description_dim=32, text_dim=32, text_layers=1, text_heads=2, text_ffn=64, common_dim=32,
        )
    elif name == "paper-dims":
        cfg = ModelConfig(
            visual=VisualConfig(frame_size=(3, 224, 224), patch_size=14, width=384, depth=12, num_heads=6,
                                ffn_dim=1536, feature_dim=512, lora=True),
            temporal=TemporalConfig(input_dim=1024, hidden_dim=512, num_heads=8, ffn_dim=2048),
            translator=TranslatorConfig(input_dim=1024, dim=1024, encoder_layers=12, decoder_layers=12,
                                        num_heads=16, ffn_dim=4096, lora=True),
            description_dim=1024, text_dim=1024, text_layers=12, text_heads=16, text_ffn=4096, common_dim=1024,
        )
    else:
        raise ConfigurationError(f"unknown model preset {name!r}")
    if frame_size is not None and tuple(frame_size) != cfg.visual.frame_size:
        cfg = replace(cfg, visual=replace(cfg.visual, frame_size=tuple(frame_size)))
    return cfg


@dataclass
class VideoEncoding:
    f_video: torch.Tensor
    f_star: torch.Tensor
    f_hat: torch.Tensor
    frame_mask: torch.Tensor
    z: torch.Tensor
    z_star: torch.Tensor
    z_hat: torch.Tensor
    z_mask: torch.Tensor
    y: torch.Tensor
    y_mask: torch.Tensor


class SignTranslationModel(nn.Module):
    """Visual encoder -> distillation fusion -> temporal encoder -> description fusion -> LLM.

    The decoder is attached separately (:meth:`attach_decoder`) because it
    only exists during fine-tuning and inference.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = FrameEncoder(cfg.visual)
        self.distill = DistillationFusion(cfg.visual.feature_dim)
        self.temporal = TemporalEncoder(cfg.temporal)
        self.desc_proj = DescriptionProjector(cfg.temporal.hidden_dim, cfg.description_dim)
        self.llm_encoder = LLMEncoder(cfg.translator)
        self.decoder: TranslationDecoder | None = None

    def attach_decoder(self, vocab_size: int) -> TranslationDecoder:
        ref = next(self.parameters())
        self.decoder = TranslationDecoder(vocab_size, self.cfg.translator).to(device=ref.device, dtype=ref.dtype)
        return self.decoder

    def encode(self, frames: torch.Tensor, frame_mask: torch.Tensor) -> VideoEncoding:
        f_video = self.visual(frames, frame_mask)
        f_star, f_hat = self.distill(f_video)
        z, z_mask = self.temporal(f_hat, frame_mask)
        z_star, z_hat = self.desc_proj(z)
        y, y_mask = self.llm_encoder(z_hat, z_mask)
        return VideoEncoding(f_video, f_star, f_hat, frame_mask, z, z_star, z_hat, z_mask, y, y_mask)

    def forward(self, frames, frame_mask, prev_ids):
        if self.decoder is None:
            raise ConfigurationError("no decoder attached")
        enc = self.encode(frames, frame_mask)
        return self.decoder(prev_ids, enc.y, enc.y_mask)


def build_pretrain_heads(cfg: ModelConfig, vocab_size: int) -> PretrainHeads:
    return PretrainHeads(
        vocab_size,
        zhat_dim=2 * cfg.temporal.hidden_dim,
        llm_dim=cfg.translator.dim,
        text_dim=cfg.text_dim,
        common_dim=cfg.common_dim,
        text_layers=cfg.text_layers,
        text_heads=cfg.text_heads,
        text_ffn=cfg.text_ffn,
        desc_seed=cfg.desc_text_seed,
        target_seed=cfg.target_text_seed,
    )


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    sample_ids: list[str]
    frames: torch.Tensor  # (B, T, C, H, W)
    frame_mask: torch.Tensor  # (B, T)
    teacher: torch.Tensor | None  # (B, T, 288)
    target_ids: list[list[int]]
    references: list[str]
    desc_ids: torch.Tensor  # (B, N)
    desc_mask: torch.Tensor
    tgt_ids: torch.Tensor  # (B, N') padded target tokens for the frozen encoder
    tgt_mask: torch.Tensor

    def __len__(self) -> int:
        return len(self.sample_ids)


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    length = max(1, max(len(s) for s in seqs))
    ids = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return ids, ids != PAD


def collate(
    samples: Sequence[Sample],
    vocab: Vocabulary,
    augment_cfg: AugmentConfig | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dtype=torch.float32,
) -> Batch:
    vids = []
    for s in samples:
        x = torch.from_numpy(np.ascontiguousarray(s.frames))
        vids.append(augment(x, mode, augment_cfg, rng) if augment_cfg is not None else x)
    t_max = max(v.shape[0] for v in vids)
    frames = torch.zeros(len(vids), t_max, *vids[0].shape[1:], dtype=dtype)
    mask = torch.zeros(len(vids), t_max, dtype=torch.bool)
    for i, v in enumerate(vids):
        frames[i, : v.shape[0]] = v
        mask[i, : v.shape[0]] = True
    teacher = None
    if all(s.teacher is not None for s in samples):
        teacher = torch.zeros(len(vids), t_max, samples[0].teacher.per_frame.shape[1], dtype=dtype)
        for i, s in enumerate(samples):
            teacher[i, : s.num_frames] = torch.from_numpy(s.teacher.per_frame)
    target_ids = [vocab.encode(s.target) for s in samples]
    desc_ids, desc_mask = pad_ids([vocab.encode(s.description) or [PAD] for s in samples])
    tgt_ids, tgt_mask = pad_ids(target_ids)
    return Batch(
        [s.sample_id for s in samples], frames, mask, teacher, target_ids, [s.target for s in samples],
        desc_ids, desc_mask, tgt_ids, tgt_mask,
    )
