"""Encoder-decoder translator: vocabulary, LLM encoder/decoder, loss and decoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import torch
import torch.nn as nn

from handslt.errors import ConfigurationError, ShapeError, ValidationError
from handslt.nn_blocks import LowRankAdapterConfig, TransformerLayer, inject_lora, sinusoidal_positions

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Whitespace vocabulary with a fixed special-token table."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(sorted({tok for text in texts for tok in tokenize(text)}))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(tok, UNK) for tok in tokenize(text)]
        return ([BOS] if add_bos else []) + ids + ([EOS] if add_eos else [])

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return " ".join(words)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.itos[len(SPECIALS):]}, indent=0)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8"))["tokens"])


@dataclass
class TokenSequence:
    ids: list[int]
    text: str = ""

    def validate(self, vocab_size: int) -> None:
        ids = self.ids
        if any(not 0 <= i < vocab_size for i in ids):
            raise ValidationError("token id outside the vocabulary")
        if PAD in ids:
            raise ValidationError("<pad> inside a token sequence")
        if BOS in ids[1:]:
            raise ValidationError("<bos> may only start a sequence")
        if EOS in ids[:-1]:
            raise ValidationError("<eos> may only end a sequence")

    @classmethod
    def from_ids(cls, ids, vocab: Vocabulary) -> "TokenSequence":
        ids = [int(i) for i in ids]
        return cls(ids, vocab.decode(ids))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

LLM_LORA_TARGETS = frozenset({"q_proj", "v_proj"})


@dataclass(frozen=True)
class TranslatorConfig:
    input_dim: int = 512
    dim: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 4
    num_heads: int = 8
    ffn_dim: int = 512
    dropout: float = 0.1
    lora: bool = False
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1

    def lora_config(self) -> LowRankAdapterConfig:
        return LowRankAdapterConfig(self.lora_rank, self.lora_alpha, self.lora_dropout, LLM_LORA_TARGETS)


class LLMEncoder(nn.Module):
    """Bridges fused video features into the language model width and encodes them."""

    def __init__(self, cfg: TranslatorConfig = TranslatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.bridge = nn.Linear(cfg.input_dim, cfg.dim)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.dim, cfg.num_heads, cfg.ffn_dim, dropout=cfg.dropout)
            for _ in range(cfg.encoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        if cfg.lora:
            inject_lora(self, cfg.lora_config())

    def forward(self, z_hat: torch.Tensor, mask: torch.Tensor | None = None):
        if z_hat.shape[-1] != self.cfg.input_dim:
            raise ConfigurationError(f"LLM encoder expects dim {self.cfg.input_dim}, got {z_hat.shape[-1]}")
        x = self.bridge(z_hat)
        x = x + sinusoidal_positions(x.shape[1], x.shape[-1], x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, mask=mask)
        return self.norm(x), mask


class TranslationDecoder(nn.Module):
    """Autoregressive decoder with causal self-attention and cross-attention to ``Y``."""

    def __init__(self, vocab_size: int, cfg: TranslatorConfig = TranslatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.dim, padding_idx=PAD)
        self.layers = nn.ModuleList(
            TransformerLayer(
                cfg.dim, cfg.num_heads, cfg.ffn_dim, causal=True, cross_attention=True, dropout=cfg.dropout
            )
            for _ in range(cfg.decoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.out = nn.Linear(cfg.dim, vocab_size)
        if cfg.lora:
            inject_lora(self, cfg.lora_config())

    def forward(self, prev_ids: torch.Tensor, y: torch.Tensor, y_mask: torch.Tensor | None = None):
        x = self.embed(prev_ids) * math.sqrt(self.cfg.dim)
        x = x + sinusoidal_positions(prev_ids.shape[1], self.cfg.dim, x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, context=y, context_mask=y_mask)
        return self.out(self.norm(x))


def llm_encode(z_hat, encoder: LLMEncoder, mask=None):
    return encoder(z_hat, mask)


def teacher_forcing_batch(sequences: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """``(<bos> + ids, ids + <eos>)`` padded to a common length."""
    length = max(len(s) for s in sequences) + 1
    inputs = torch.full((len(sequences), length), PAD, dtype=torch.long)
    targets = torch.full((len(sequences), length), PAD, dtype=torch.long)
    for i, s in enumerate(sequences):
        inputs[i, : len(s) + 1] = torch.tensor([BOS, *s])
        targets[i, : len(s) + 1] = torch.tensor([*s, EOS])
    return inputs, targets


class SLTLoss(NamedTuple):
    total: torch.Tensor  # summed over tokens
    mean: torch.Tensor  # per token, used for optimisation


def slt_loss(logits: torch.Tensor, target: torch.Tensor, pad_id: int = PAD) -> SLTLoss:
    """Cross-entropy of gold tokens under teacher-forced logits; pad steps ignored."""
    target = torch.as_tensor(target, device=logits.device)
    if logits.shape[:-1] != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} do not align with target {tuple(target.shape)}")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    valid = target != pad_id
    total = torch.where(valid, nll, torch.zeros((), dtype=nll.dtype, device=nll.device)).sum()
    count = valid.sum().clamp(min=1)
    return SLTLoss(total, total / count.to(total.dtype))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

StepFn = Callable[[torch.Tensor], torch.Tensor]  # (N, L) prefixes -> (N, V) log-probs


def length_normalized(logp: float, length: int, alpha: float) -> float:
    return logp / (max(length, 1) ** alpha)


@torch.no_grad()
def greedy_decode(step_fn: StepFn, batch_size: int, max_len: int, bos: int = BOS, eos: int = EOS):
    """Batched greedy decoding.  Returns ``(ids, logp)`` lists per item (ids exclude <bos>)."""
    if max_len < 1:
        raise ConfigurationError("max_len must be >= 1")
    prefixes = torch.full((batch_size, 1), bos, dtype=torch.long)
    done = torch.zeros(batch_size, dtype=torch.bool)
    scores = torch.zeros(batch_size, dtype=torch.float64)
    for _ in range(max_len):
        logp = step_fn(prefixes)
        best = logp.argmax(dim=-1)
        gain = logp.gather(-1, best[:, None]).squeeze(-1).to(torch.float64)
        scores = torch.where(done, scores, scores + gain)
        best = torch.where(done, torch.full_like(best, eos), best)
        prefixes = torch.cat([prefixes, best[:, None]], dim=1)
        done |= best == eos
        if done.all():
            break
    results = []
    for i in range(batch_size):
        seq = prefixes[i, 1:].tolist()
        if eos in seq:
            seq = seq[: seq.index(eos) + 1]
        results.append((seq, float(scores[i])))
    return results


@torch.no_grad()
def beam_search(
    step_fn: StepFn,
    beam_size: int,
    max_len: int,
    length_penalty: float = 1.0,
    bos: int = BOS,
    eos: int = EOS,
):
    """Beam search for a single input.

    Hypotheses leave the beam when they emit ``eos`` or reach ``max_len``.
    The winner maximises ``log P / len**length_penalty`` (``len`` counts
    generated tokens, ``eos`` included).  The greedy path is always entered as
    a candidate, so the result never scores below greedy decoding.

    Returns ``(ids, normalized_score)``; ids exclude ``bos``.
    """
    if beam_size < 1:
        raise ConfigurationError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ConfigurationError("max_len must be >= 1")
    active: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len):
        prefixes = torch.tensor([[bos, *seq] for seq, _ in active], dtype=torch.long)
        logp = step_fn(prefixes).to(torch.float64)
        base = torch.tensor([s for _, s in active], dtype=torch.float64)
        cand = (base[:, None] + logp).flatten()
        k = min(beam_size, int(torch.isfinite(cand).sum()))
        if k == 0:
            break
        top_scores, top_idx = cand.topk(k)
        vocab = logp.shape[-1]
        next_active = []
        for score, idx in zip(top_scores.tolist(), top_idx.tolist()):
            seq = active[idx // vocab][0] + [idx % vocab]
            if seq[-1] == eos or step == max_len - 1:
                finished.append((seq, score))
            else:
                next_active.append((seq, score))
        active = next_active
        if not active:
            break
        if finished and length_penalty >= 0:
            # log-probs are <= 0, so no extension of an active hypothesis can beat this bound
            best_done = max(length_normalized(sc, len(sq), length_penalty) for sq, sc in finished)
            if all(length_normalized(sc, max_len, length_penalty) <= best_done for _, sc in active):
                break
    finished.extend(greedy_decode(step_fn, 1, max_len, bos, eos))
    best_seq, best_score = None, -math.inf
    for seq, score in finished:
        norm = length_normalized(score, len(seq), length_penalty)
        if norm > best_score:
            best_seq, best_score = seq, norm
    return best_seq, best_score


def decoder_step_fn(decoder: TranslationDecoder, y: torch.Tensor, y_mask: torch.Tensor | None) -> StepFn:
    """Wrap a decoder and one encoded input (``(1, T, K)``) as a step function."""

    def step(prefixes: torch.Tensor) -> torch.Tensor:
        n = prefixes.shape[0]
        yy = y.expand(n, -1, -1)
        mm = None if y_mask is None else y_mask.expand(n, -1)
        logits = decoder(prefixes.to(y.device), yy, mm)[:, -1]
        logits[:, PAD] = -math.inf
        logits[:, BOS] = -math.inf
        return torch.log_softmax(logits.float(), dim=-1).cpu()

    return step


@torch.no_grad()
def decode(
    decoder: TranslationDecoder,
    y: torch.Tensor,
    y_mask: torch.Tensor | None = None,
    mode: str = "beam",
    beam_size: int = 5,
    max_len: int = 64,
    length_penalty: float = 1.0,
) -> list[list[int]]:
    """Decode a batch of encoded inputs ``(B, T, K)``; returns token ids (with eos if emitted)."""
    if mode not in ("greedy", "beam"):
        raise ConfigurationError(f"unknown decode mode {mode!r}")
    if beam_size < 1:
        raise ConfigurationError(f"beam_size must be >= 1, got {beam_size}")
    if mode == "greedy" or beam_size == 1:
        return [seq for seq, _ in greedy_decode(_batched_step(decoder, y, y_mask), y.shape[0], max_len)]
    out = []
    for i in range(y.shape[0]):
        mask_i = None if y_mask is None else y_mask[i : i + 1]
        seq, _ = beam_search(decoder_step_fn(decoder, y[i : i + 1], mask_i), beam_size, max_len, length_penalty)
        out.append(seq)
    return out


def _batched_step(decoder, y, y_mask) -> StepFn:
    def step(prefixes):
        logits = decoder(prefixes.to(y.device), y, y_mask)[:, -1]
        logits[:, PAD] = -math.inf
        logits[:, BOS] = -math.inf
        return torch.log_softmax(logits.float(), dim=-1).cpu()

    return step
