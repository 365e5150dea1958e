"""Per-frame visual encoder, hand-pose teacher features and feature distillation.

The frame encoder is a small ViT: patch embedding, class token, pre-norm
transformer layers, then the class-token output goes through a linear map
and batch normalisation.  Teacher features are 32 rotation matrices per
frame (15 pose joints and one global orientation for each of two hands),
flattened row-major to 288 values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from handslt.errors import ConfigurationError, ShapeError, ValidationError
from handslt.nn_blocks import LowRankAdapterConfig, MapperBlock, TransformerLayer, inject_lora

TEACHER_DIM = 288
NUM_HANDS = 2
NUM_JOINTS = 15
POSE_DIM = NUM_HANDS * NUM_JOINTS * 9  # 270
ORIENT_DIM = NUM_HANDS * 9  # 18
NUM_BLOCKS = TEACHER_DIM // 9  # 32

VISUAL_LORA_TARGETS = frozenset({"q_proj", "k_proj", "v_proj", "out_proj", "fc1", "fc2"})


@dataclass(frozen=True)
class VisualConfig:
    frame_size: tuple[int, int, int] = (3, 64, 64)
    patch_size: int = 16
    width: int = 128
    depth: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    feature_dim: int = 128
    bn_momentum: float = 0.1
    lora: bool = False
    lora_layers: int = 3
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_dropout: float = 0.1

    def __post_init__(self):
        _, h, w = self.frame_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(f"frame {h}x{w} is not divisible by patch size {self.patch_size}")
        if self.lora and self.lora_layers > self.depth:
            raise ConfigurationError("cannot attach adapters to more layers than the encoder has")


class FrameEncoder(nn.Module):
    """Maps frames ``(B, T, C, H, W)`` to per-frame features ``(B, T, D)``."""

    def __init__(self, cfg: VisualConfig = VisualConfig()):
        super().__init__()
        self.cfg = cfg
        c, h, w = cfg.frame_size
        p = cfg.patch_size
        self.num_patches = (h // p) * (w // p)
        self.patch_embed = nn.Linear(c * p * p, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_patches + 1, cfg.width) * 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.width, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.feature_dim)
        self.bn = nn.BatchNorm1d(cfg.feature_dim, momentum=cfg.bn_momentum)
        if cfg.lora:
            lora_cfg = LowRankAdapterConfig(
                cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, VISUAL_LORA_TARGETS
            )
            for layer in self.layers[-cfg.lora_layers :]:
                inject_lora(layer, lora_cfg)

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        p = self.cfg.patch_size
        x = x.reshape(n, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(n, (h // p) * (w // p), c * p * p)

    def encode_flat(self, frames: torch.Tensor) -> torch.Tensor:
        """Encode a flat batch of frames ``(N, C, H, W)`` into ``(N, D)``."""
        if tuple(frames.shape[1:]) != tuple(self.cfg.frame_size):
            raise ShapeError(
                f"frames of shape {tuple(frames.shape[1:])} do not match config {self.cfg.frame_size}"
            )
        tokens = self.patch_embed(self._patchify(frames))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for layer in self.layers:
            x = layer(x)
        return self.bn(self.head(self.norm(x[:, 0])))

    def forward(self, frames: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if frames.dim() != 5:
            raise ShapeError(f"expected (B, T, C, H, W) frames, got {tuple(frames.shape)}")
        b, t = frames.shape[:2]
        if mask is None:
            return self.encode_flat(frames.reshape(b * t, *frames.shape[2:])).view(b, t, -1)
        # padding frames never reach the encoder, so they cannot touch batch-norm statistics
        feats = self.encode_flat(frames[mask])
        out = feats.new_zeros(b, t, feats.shape[-1])
        out[mask] = feats
        return out


def encode_frames(frames: torch.Tensor, encoder: FrameEncoder, mask: torch.Tensor | None = None):
    return encoder(frames, mask)


# ---------------------------------------------------------------------------
# teacher features
# ---------------------------------------------------------------------------


def axis_angle_to_matrix(axis: np.ndarray, angle) -> np.ndarray:
    """Rodrigues' formula (float64).  ``axis`` is ``(..., 3)``, ``angle`` broadcasts to ``(...)``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], -2
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def is_rotation(r: np.ndarray, tol: float = 1e-5) -> bool:
    r = np.asarray(r, dtype=np.float64)
    return bool(
        np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0.0) and abs(np.linalg.det(r) - 1.0) <= tol
    )


def rotation_blocks(per_frame: np.ndarray) -> np.ndarray:
    """View a ``(T, 288)`` teacher matrix as ``(T, 32, 3, 3)`` rotation blocks."""
    per_frame = np.asarray(per_frame)
    return per_frame.reshape(per_frame.shape[0], NUM_BLOCKS, 3, 3)


@dataclass
class HandTeacherFeatures:
    per_frame: np.ndarray  # (T*, 288) float32

    def __post_init__(self):
        self.per_frame = np.asarray(self.per_frame, dtype=np.float32)
        if self.per_frame.ndim != 2 or self.per_frame.shape[1] != TEACHER_DIM:
            raise ShapeError(f"teacher features must be (T, {TEACHER_DIM}), got {self.per_frame.shape}")

    @property
    def num_frames(self) -> int:
        return self.per_frame.shape[0]

    def validate(self, tol: float = 1e-5) -> None:
        blocks = rotation_blocks(self.per_frame).astype(np.float64)
        gram = np.einsum("tbji,tbjk->tbik", blocks, blocks)
        ortho_err = np.abs(gram - np.eye(3)).max(initial=0.0)
        det_err = np.abs(np.linalg.det(blocks) - 1.0).max(initial=0.0)
        if ortho_err > tol or det_err > tol:
            raise ValidationError(
                f"teacher blocks are not rotations (orthogonality err {ortho_err:.2e}, det err {det_err:.2e})"
            )


def hamer_flatten(H: np.ndarray, G: np.ndarray, validate: bool = False) -> np.ndarray:
    """Row-major flatten of pose ``(2, 15, 3, 3)`` then orientation ``(2, 3, 3)``.

    Leading batch axes are allowed on both arguments.
    """
    H = np.asarray(H)
    G = np.asarray(G)
    if H.shape[-4:] != (NUM_HANDS, NUM_JOINTS, 3, 3) or G.shape[-3:] != (NUM_HANDS, 3, 3):
        raise ShapeError(f"expected H (...,2,15,3,3) and G (...,2,3,3), got {H.shape} and {G.shape}")
    if validate:
        for block in np.concatenate([H.reshape(-1, 3, 3), G.reshape(-1, 3, 3)]):
            if not is_rotation(block):
                raise ValidationError("hand parameters contain a non-rotation 3x3 block")
    lead = H.shape[:-4]
    return np.concatenate([H.reshape(*lead, POSE_DIM), G.reshape(*lead, ORIENT_DIM)], axis=-1)


def fill_missing_hands(H: np.ndarray, G: np.ndarray, present) -> tuple[np.ndarray, np.ndarray]:
    """Replace the parameters of absent hands with identity rotations.

    ``present`` is a length-2 boolean sequence (one flag per hand).
    """
    H = np.array(H, dtype=np.float64, copy=True)
    G = np.array(G, dtype=np.float64, copy=True)
    for hand, ok in enumerate(present):
        if not ok:
            H[..., hand, :, :, :] = np.eye(3)
            G[..., hand, :, :] = np.eye(3)
    return H, G


def gesture_rotations(gesture_id: int, seed: int) -> np.ndarray:
    """The fixed 32 base rotations of one gesture, ``(32, 3, 3)`` float64."""
    rng = np.random.default_rng([seed, gesture_id, 0x4A4D])
    axes = rng.normal(size=(NUM_BLOCKS, 3))
    angles = rng.uniform(0.0, np.pi, size=NUM_BLOCKS)
    return axis_angle_to_matrix(axes, angles)


def synthetic_teacher(
    gesture_ids,
    seed: int,
    num_gestures: int = 20,
    jitter: float = 0.05,
    jitter_seed: int | None = None,
) -> HandTeacherFeatures:
    """Deterministic stand-in for a hand-mesh teacher.

    Each gesture owns 32 base rotations fixed by ``(gesture_id, seed)``.  Every
    frame composes them with an independent rotation of angle at most
    ``jitter`` radians drawn from ``jitter_seed`` (defaults to ``seed``).
    """
    ids = [int(g) for g in gesture_ids]
    for g in ids:
        if not 0 <= g < num_gestures:
            raise LookupError(f"unknown gesture id {g} (vocabulary has {num_gestures})")
    base = {g: gesture_rotations(g, seed) for g in set(ids)}
    rng = np.random.default_rng([seed if jitter_seed is None else jitter_seed, 0x717])
    axes = rng.normal(size=(len(ids), NUM_BLOCKS, 3))
    angles = rng.uniform(0.0, jitter, size=(len(ids), NUM_BLOCKS))
    stacked = np.stack([base[g] for g in ids]) if ids else np.empty((0, NUM_BLOCKS, 3, 3))
    out = axis_angle_to_matrix(axes, angles) @ stacked
    return HandTeacherFeatures(out.reshape(len(ids), TEACHER_DIM))


# ---------------------------------------------------------------------------
# distillation mappers and loss
# ---------------------------------------------------------------------------


class DistillationFusion(nn.Module):
    """Maps visual features into teacher space and back, then concatenates."""

    def __init__(self, feature_dim: int, teacher_dim: int = TEACHER_DIM):
        super().__init__()
        self.mapper1 = MapperBlock(feature_dim, teacher_dim)
        self.mapper2 = MapperBlock(teacher_dim, feature_dim)

    def forward(self, f_video: torch.Tensor):
        return distill_fuse(f_video, self.mapper1, self.mapper2)


def distill_fuse(f_video: torch.Tensor, mapper1: MapperBlock, mapper2: MapperBlock):
    """Returns ``(f_star, f_hat)`` with ``f_hat = concat(mapper2(f_star), f_video)``."""
    d = f_video.shape[-1]
    if mapper1.input_dim != d or mapper2.input_dim != mapper1.output_dim or mapper2.output_dim != d:
        raise ConfigurationError(
            f"mapper dims {mapper1.input_dim}->{mapper1.output_dim}->{mapper2.output_dim} "
            f"incompatible with feature dim {d}"
        )
    f_star = mapper1(f_video)
    f_prime = mapper2(f_star)
    return f_star, torch.cat([f_prime, f_video], dim=-1)


def distill_loss(
    f_star: torch.Tensor,
    f_teacher,
    mask: torch.Tensor | None = None,
    kind: str = "abs",
) -> torch.Tensor:
    """Mean over valid frames and all 288 channels of ``|f_star - teacher|``.

    ``kind="squared"`` swaps the absolute difference for the squared one.  The
    teacher is treated as a constant.
    """
    if isinstance(f_teacher, HandTeacherFeatures):
        f_teacher = torch.from_numpy(f_teacher.per_frame)
    f_teacher = torch.as_tensor(f_teacher).to(device=f_star.device, dtype=f_star.dtype).detach()
    if f_star.shape != f_teacher.shape:
        raise ShapeError(f"student {tuple(f_star.shape)} vs teacher {tuple(f_teacher.shape)}")
    diff = f_star - f_teacher
    if kind == "abs":
        per_elem = diff.abs()
    elif kind == "squared":
        per_elem = diff.square()
    else:
        raise ConfigurationError(f"unknown distill_loss_kind {kind!r}")
    if mask is None:
        return per_elem.mean()
    if mask.shape != f_star.shape[:-1]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match frames {tuple(f_star.shape[:-1])}")
    mask = mask.bool()
    total = torch.where(mask[..., None], per_elem, torch.zeros((), dtype=per_elem.dtype)).sum()
    return total / (mask.sum() * f_star.shape[-1]).to(per_elem.dtype)
