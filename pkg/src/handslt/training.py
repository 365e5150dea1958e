"""Pre-training and fine-tuning loops, evaluation and the ablation runner."""

from __future__ import annotations

import copy
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from handslt.alignment import LossWeights, pretrain_loss
from handslt.checkpoint import (
    Checkpoint,
    load_module,
    load_optimizer,
    module_tensors,
    optimizer_tensors,
    restore_rng,
    rng_tensors,
    save_checkpoint,
)
from handslt.data import AugmentConfig, Sample, load_dataset, load_vocab
from handslt.errors import ConfigurationError, IncompatibleCheckpointError, TrainingDivergenceError, ValidationError
from handslt.metrics import score_report
from handslt.model import (
    CARRIED_OVER,
    Batch,
    ModelConfig,
    SignTranslationModel,
    build_pretrain_heads,
    collate,
    model_preset,
)
from handslt.translator import PAD, SPECIALS, Vocabulary, decode, slt_loss, teacher_forcing_batch
from handslt.visual import distill_loss

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    weight_decay: float = 1e-3
    lambda_distill: float = 0.3
    lambda_desc: float = 0.5
    lambda_align: float = 1.0
    distill: bool = True
    desc_align: bool = True
    target_align: bool = True
    seed: int = 0
    model_preset: str = "default"
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    max_steps: int | None = None
    augment: bool = True
    distill_loss_kind: str = "abs"
    val_decode: str = "greedy"
    beam_size: int = 5
    max_len: int = 64
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        LossWeights(self.lambda_align, self.lambda_desc, self.lambda_distill)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_align, self.lambda_desc, self.lambda_distill)

    @property
    def active_terms(self) -> dict[str, bool]:
        """Which pre-training terms are computed. A zero weight switches a term off."""
        return {
            "l_distill": self.distill and self.lambda_distill > 0,
            "l_desc": self.desc_align and self.lambda_desc > 0,
            "l_align": self.target_align and self.lambda_align > 0,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**raw)


SCHEDULES = {"desk": {"pretrain": 30, "finetune": 60}, "paper-schedule": {"pretrain": 100, "finetune": 200}}


def schedule_epochs(name: str, phase: str) -> int:
    if name not in SCHEDULES:
        raise ConfigurationError(f"unknown schedule {name!r}")
    return SCHEDULES[name][phase]


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class DataBundle:
    """Samples held in memory together with the shared vocabulary."""

    vocab: Vocabulary
    splits: dict[str, list[Sample]]
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def load(cls, root, splits=("train", "val", "test"), require_teacher: bool = False,
             augment: AugmentConfig | None = None) -> "DataBundle":
        loaded = {s: list(load_dataset(root, s, require_teacher=require_teacher)) for s in splits}
        if augment is None:
            frame = next(iter(loaded.values()))[0].frames.shape[-1]
            augment = AugmentConfig(frame + frame // 8, frame)
        return cls(load_vocab(root), loaded, augment)

    def __getitem__(self, split: str) -> list[Sample]:
        if split not in self.splits:
            raise ValidationError(f"split {split!r} was not loaded")
        return self.splits[split]


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    """One training phase.

    Data order, crop offsets and dropout masks are derived from
    ``(seed, global_step)``, so a run resumed from a checkpoint follows the
    uninterrupted trajectory exactly.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        data: DataBundle,
        model_cfg: ModelConfig | None = None,
        init_from: Checkpoint | None = None,
        out_dir=None,
        train_split: str = "train",
        val_split: str | None = "val",
    ):
        self.cfg = cfg
        self.data = data
        self.vocab = data.vocab
        self.train_samples = data[train_split]
        self.val_samples = data[val_split] if val_split else []
        if not self.train_samples:
            raise ValidationError("training split is empty")
        frame_size = tuple(self.train_samples[0].frames.shape[1:])
        if model_cfg is None and init_from is not None:
            model_cfg = ModelConfig.from_dict(init_from.config["model"])
        self.model_cfg = model_cfg or model_preset(cfg.model_preset, frame_size=frame_size)
        self.out_dir = Path(out_dir) if out_dir else None
        self.tags: list[str] = []

        torch.manual_seed(cfg.seed)
        self.model = SignTranslationModel(self.model_cfg)
        self.heads = None
        if cfg.phase == "pretrain":
            active = cfg.active_terms
            if active["l_distill"] and any(s.teacher is None for s in self.train_samples + self.val_samples):
                raise ValidationError("distillation is switched on but some samples have no teacher features")
            if active["l_desc"] or active["l_align"]:
                self.heads = build_pretrain_heads(self.model_cfg, len(self.vocab))
            if init_from is not None:
                load_module(self.model, init_from.section("model"))
        else:
            if init_from is None:
                self.tags.append("baseline")
            else:
                carried = {k: v for k, v in init_from.section("model").items() if k.split(".")[0] in CARRIED_OVER}
                load_module(self.model, carried)
            torch.manual_seed(_derive_seed(cfg.seed, 0xDEC))
            self.model.attach_decoder(len(self.vocab))

        params = list(self.model.parameters())
        if self.heads is not None:
            params += [p for p in self.heads.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        warm = cfg.warmup_steps
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda s: min(1.0, (s + 1) / warm) if warm > 0 else 1.0
        )
        self.global_step = 0
        self.step_log: list[dict] = []
        self.epoch_log: list[dict] = []
        self.best_metric: float | None = None
        self.best_epoch: int | None = None
        self._best_state: dict | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_samples) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        n = self.cfg.epochs * self.steps_per_epoch
        return n if self.cfg.max_steps is None else min(n, self.cfg.max_steps)

    @property
    def epoch(self) -> int:
        return self.global_step // self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, i = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch, 0x0D]).permutation(len(self.train_samples))
        return order[i * self.cfg.batch_size : (i + 1) * self.cfg.batch_size]

    def make_batch(self, samples: Sequence[Sample], mode: str, rng=None) -> Batch:
        aug = self.data.augment if self.cfg.augment else None
        return collate(samples, self.vocab, aug, mode if aug is not None else "eval", rng)

    def _modules(self):
        mods = [self.model]
        if self.heads is not None:
            mods.append(self.heads)
        return mods

    def _set_train(self, flag: bool) -> None:
        for m in self._modules():
            m.train(flag)

    # -- losses ------------------------------------------------------------

    def pretrain_losses(self, batch: Batch):
        active = self.cfg.active_terms
        enc = self.model.encode(batch.frames, batch.frame_mask)
        l_distill = l_desc = l_align = None
        if active["l_distill"]:
            if batch.teacher is None:
                raise ValidationError("distillation is switched on but the batch has no teacher features")
            l_distill = distill_loss(enc.f_star, batch.teacher, batch.frame_mask, self.cfg.distill_loss_kind)
        if active["l_desc"]:
            l_desc = self.heads.desc_loss(enc.z_hat, enc.z_mask, batch.desc_ids, batch.desc_mask)
        if active["l_align"]:
            l_align = self.heads.align_loss(enc.y, enc.y_mask, batch.tgt_ids, batch.tgt_mask)
        return pretrain_loss(l_align, l_desc, l_distill, self.cfg.loss_weights)

    def finetune_loss(self, batch: Batch):
        prev, gold = teacher_forcing_batch(batch.target_ids)
        logits = self.model(batch.frames, batch.frame_mask, prev)
        loss = slt_loss(logits, gold, PAD)
        value = float(loss.mean.detach())
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"l_slt is {value}", component="l_slt")
        return loss.mean, {"l_slt": value, "total": value}

    # -- steps -------------------------------------------------------------

    def train_step(self) -> dict:
        step = self.global_step
        idx = self.batch_indices(step)
        record = {"step": step + 1, "epoch": self.epoch}
        if self.cfg.phase == "pretrain" and not any(self.cfg.active_terms.values()):
            # nothing to optimise; weight decay alone must not move the parameters
            record.update({"l_align": None, "l_desc": None, "l_distill": None, "total": 0.0,
                           "tau1": None, "tau2": None})
            self.global_step += 1
            self.step_log.append(record)
            return record
        torch.manual_seed(_derive_seed(self.cfg.seed, step, 0x5EED))
        rng = np.random.default_rng([self.cfg.seed, step, 0xA6])
        batch = self.make_batch([self.train_samples[i] for i in idx], "train", rng)
        self._set_train(True)
        if self.cfg.phase == "pretrain":
            loss, comps = self.pretrain_losses(batch)
        else:
            loss, comps = self.finetune_loss(batch)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        self.optimizer.step()
        self.scheduler.step()
        if self.heads is not None:
            self.heads.clamp_temperatures_()
        self.global_step += 1
        if self.cfg.phase == "pretrain":
            record.update({k: comps.get(k) for k in ("l_align", "l_desc", "l_distill")})
            record["total"] = comps["total"]
            record["tau1"] = float(self.heads.tau_desc().detach()) if self.heads is not None else None
            record["tau2"] = float(self.heads.tau_align().detach()) if self.heads is not None else None
        else:
            record.update(comps)
        self.step_log.append(record)
        return record

    # -- validation --------------------------------------------------------

    @torch.no_grad()
    def validate(self) -> dict:
        """Validation total loss (pre-training) or BLEU-4 (fine-tuning)."""
        if not self.val_samples:
            return {}
        self._set_train(False)
        if self.cfg.phase == "pretrain":
            if not any(self.cfg.active_terms.values()):
                return {"val_total": 0.0}
            sums: dict[str, float] = {}
            count = 0
            for start in range(0, len(self.val_samples), self.cfg.batch_size):
                chunk = self.val_samples[start : start + self.cfg.batch_size]
                _, comps = self.pretrain_losses(self.make_batch(chunk, "eval"))
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v * len(chunk)
                count += len(chunk)
            return {f"val_{k}": v / count for k, v in sums.items()}
        records = translate(self.model, self.val_samples, self.vocab, mode=self.cfg.val_decode,
                            beam_size=self.cfg.beam_size, max_len=self.cfg.max_len,
                            length_penalty=self.cfg.length_penalty, augment=self.data.augment if self.cfg.augment else None,
                            batch_size=self.cfg.batch_size)
        report = score_records(records)
        return {"val_bleu4": report["bleu4"], "val_rouge_l": report["rouge_l"]}

    def _is_better(self, metrics: dict) -> bool:
        if self.cfg.phase == "pretrain":
            value = metrics.get("val_total")
            return value is not None and (self.best_metric is None or value < self.best_metric)
        value = metrics.get("val_bleu4")
        return value is not None and (self.best_metric is None or value >= self.best_metric)

    def _snapshot(self) -> dict:
        return {
            "model": copy.deepcopy(self.model.state_dict()),
            "heads": copy.deepcopy(self.heads.state_dict()) if self.heads is not None else None,
        }

    # -- loop --------------------------------------------------------------

    def fit(self, progress: Callable[[dict], None] | None = None) -> "Trainer":
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(self.out_dir / f"{self.cfg.phase}_log.jsonl", "a", encoding="utf-8")
        try:
            epoch_records: list[dict] = []
            t0 = time.perf_counter()
            while self.global_step < self.total_steps:
                rec = self.train_step()
                epoch_records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if self.global_step % self.steps_per_epoch == 0 or self.global_step == self.total_steps:
                    summary = self._end_epoch(epoch_records, time.perf_counter() - t0)
                    if progress is not None:
                        progress(summary)
                    epoch_records = []
                    t0 = time.perf_counter()
        finally:
            if log_fh is not None:
                log_fh.close()
        if self._best_state is not None:
            self.model.load_state_dict(self._best_state["model"])
            if self.heads is not None and self._best_state["heads"] is not None:
                self.heads.load_state_dict(self._best_state["heads"])
        if self.out_dir is not None:
            save_checkpoint(self.checkpoint(include_optimizer=False), self.out_dir / f"{self.cfg.phase}_best.ckpt")
        return self

    def _end_epoch(self, records: list[dict], seconds: float) -> dict:
        summary = {"epoch": math.ceil(self.global_step / self.steps_per_epoch), "steps": self.global_step,
                   "seconds": round(seconds, 2)}
        for key in ("l_align", "l_desc", "l_distill", "l_slt", "total"):
            vals = [r[key] for r in records if r.get(key) is not None]
            if vals:
                summary[key] = float(np.mean(vals))
        metrics = self.validate()
        summary.update(metrics)
        if self._is_better(metrics):
            self.best_metric = metrics["val_total" if self.cfg.phase == "pretrain" else "val_bleu4"]
            self.best_epoch = summary["epoch"]
            self._best_state = self._snapshot()
        self.epoch_log.append(summary)
        log.info("%s epoch %s: %s", self.cfg.phase, summary["epoch"], summary)
        if self.out_dir is not None:
            save_checkpoint(self.checkpoint(), self.out_dir / f"{self.cfg.phase}_last.ckpt")
        return summary

    # -- checkpoints -------------------------------------------------------

    def checkpoint(self, include_optimizer: bool = True) -> Checkpoint:
        tensors = module_tensors(self.model, "model")
        if self.heads is not None:
            tensors.update({k: v for k, v in module_tensors(self.heads, "heads").items()})
        extra = {
            "phase": self.cfg.phase,
            "tags": list(self.tags),
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "has_decoder": self.model.decoder is not None,
        }
        if include_optimizer:
            opt_tensors, groups = optimizer_tensors(self.optimizer)
            tensors.update(opt_tensors)
            tensors.update(rng_tensors())
            extra["optimizer_groups"] = groups
            extra["scheduler"] = self.scheduler.state_dict()
        config = {"train": self.cfg.to_dict(), "model": self.model_cfg.to_dict(), "vocab": self.vocab.itos[len(SPECIALS):]}
        return Checkpoint(tensors, config, self.epoch, self.global_step, extra)

    @classmethod
    def resume(cls, ckpt: Checkpoint, data: DataBundle, out_dir=None, **overrides) -> "Trainer":
        cfg = TrainConfig.from_dict({**ckpt.config["train"], **overrides})
        model_cfg = ModelConfig.from_dict(ckpt.config["model"])
        trainer = cls(cfg, data, model_cfg, init_from=None, out_dir=out_dir)
        load_module(trainer.model, ckpt.section("model"))
        if trainer.heads is not None:
            load_module(trainer.heads, ckpt.section("heads"))
        load_optimizer(trainer.optimizer, ckpt)
        if "scheduler" in ckpt.extra:
            trainer.scheduler.load_state_dict(ckpt.extra["scheduler"])
        restore_rng(ckpt)
        trainer.global_step = ckpt.global_step
        trainer.tags = list(ckpt.extra.get("tags", []))
        trainer.best_metric = ckpt.extra.get("best_metric")
        trainer.best_epoch = ckpt.extra.get("best_epoch")
        return trainer


# ---------------------------------------------------------------------------
# phase entry points
# ---------------------------------------------------------------------------


def pretrain(cfg: TrainConfig, data: DataBundle, out_dir=None, model_cfg: ModelConfig | None = None,
             progress=None) -> Trainer:
    if cfg.phase != "pretrain":
        cfg = replace(cfg, phase="pretrain")
    return Trainer(cfg, data, model_cfg, out_dir=out_dir).fit(progress)


def finetune(cfg: TrainConfig, data: DataBundle, pretrained: Checkpoint | None = None, out_dir=None,
             model_cfg: ModelConfig | None = None, progress=None, train_split: str = "train",
             val_split: str | None = "val") -> Trainer:
    if cfg.phase != "finetune":
        cfg = replace(cfg, phase="finetune")
    if pretrained is not None:
        missing = [
            f"model/{k}" for k in SignTranslationModel(
                model_cfg or ModelConfig.from_dict(pretrained.config["model"])
            ).state_dict()
            if f"model/{k}" not in pretrained.tensors
        ]
        if missing:
            raise IncompatibleCheckpointError(missing)
    trainer = Trainer(cfg, data, model_cfg, init_from=pretrained, out_dir=out_dir,
                      train_split=train_split, val_split=val_split)
    return trainer.fit(progress)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[SignTranslationModel, Vocabulary]:
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    vocab = Vocabulary(ckpt.config["vocab"])
    model = SignTranslationModel(model_cfg)
    if ckpt.extra.get("has_decoder"):
        model.attach_decoder(len(vocab))
    load_module(model, ckpt.section("model"))
    model.eval()
    return model, vocab


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def translate(
    model: SignTranslationModel,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    mode: str = "beam",
    beam_size: int = 5,
    max_len: int = 64,
    length_penalty: float = 1.0,
    augment: AugmentConfig | None = None,
    batch_size: int = 16,
) -> list[dict]:
    """Decode every sample; returns ``{sample_id, hypothesis, reference}`` records."""
    if model.decoder is None:
        raise ConfigurationError("model has no decoder; fine-tune before translating")
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = collate(chunk, vocab, augment, "eval")
            enc = model.encode(batch.frames, batch.frame_mask)
            seqs = decode(model.decoder, enc.y, enc.y_mask, mode=mode, beam_size=beam_size, max_len=max_len,
                          length_penalty=length_penalty)
            for s, seq in zip(chunk, seqs):
                out.append({"sample_id": s.sample_id, "hypothesis": vocab.decode(seq), "reference": s.target})
    finally:
        model.train(was_training)
    return out


def score_records(records: Sequence[dict]) -> dict:
    return score_report([r["hypothesis"] for r in records], [r["reference"] for r in records])


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    name: str
    pretrain: bool = True
    distill: bool = True
    desc_align: bool = True
    target_align: bool = True
    lambda_distill: float = 0.3
    lambda_desc: float = 0.5
    lambda_align: float = 1.0

    @classmethod
    def from_weights(cls, name: str, distill: float, desc: float, align: float) -> "AblationCell":
        return cls(name, pretrain=(distill + desc + align) > 0, distill=distill > 0, desc_align=desc > 0,
                   target_align=align > 0, lambda_distill=distill, lambda_desc=desc, lambda_align=align)

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return replace(cfg, distill=self.distill, desc_align=self.desc_align, target_align=self.target_align,
                       lambda_distill=self.lambda_distill, lambda_desc=self.lambda_desc,
                       lambda_align=self.lambda_align)


COMPONENT_GRID = (
    AblationCell("(1)", pretrain=False, distill=False, desc_align=False, target_align=False),
    AblationCell("(2)", distill=False, desc_align=False, target_align=True),
    AblationCell("(3)", distill=False, desc_align=True, target_align=True),
    AblationCell("(4)", distill=True, desc_align=True, target_align=False),
    AblationCell("(5)", distill=True, desc_align=True, target_align=True),
)

WEIGHT_GRID = tuple(
    AblationCell.from_weights(f"({i})", *w)
    for i, w in enumerate(
        [(0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 1.0), (0.0, 0.5, 1.0), (1.0, 1.0, 1.0), (0.5, 1.0, 1.0),
         (0.3, 0.5, 1.0)],
        start=1,
    )
)

GRIDS = {"components": COMPONENT_GRID, "weights": WEIGHT_GRID}


@dataclass
class CellResult:
    cell: AblationCell
    bleu4: list[float] = field(default_factory=list)
    rouge_l: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    @staticmethod
    def _stats(values):
        if not values:
            return None, None
        return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0

    def to_dict(self) -> dict:
        b_mean, b_std = self._stats(self.bleu4)
        r_mean, r_std = self._stats(self.rouge_l)
        return {"cell": asdict(self.cell), "seeds": self.seeds, "bleu4": self.bleu4, "rouge_l": self.rouge_l,
                "bleu4_mean": b_mean, "bleu4_std": b_std, "rouge_l_mean": r_mean, "rouge_l_std": r_std,
                "failed": self.failed, "errors": self.errors}


@dataclass
class AblationReport:
    layout: str
    results: list[CellResult]

    def to_dict(self) -> dict:
        return {"layout": self.layout, "cells": [r.to_dict() for r in self.results]}

    def render(self) -> str:
        if self.layout == "weights":
            head = ["", "l_distill", "l_desc", "l_align"]
        else:
            head = ["", "distill", "desc-align", "target-align"]
        head += ["B-4", "R"]
        rows = [head]
        for r in self.results:
            c = r.cell
            if self.layout == "weights":
                cols = [c.name, f"{c.lambda_distill:.1f}", f"{c.lambda_desc:.1f}", f"{c.lambda_align:.1f}"]
            else:
                cols = [c.name] + ["x" if on else "-" for on in (c.distill, c.desc_align, c.target_align)]
            d = r.to_dict()
            if d["bleu4_mean"] is None:
                cols += ["failed", "failed"]
            else:
                suffix = " (partial)" if r.failed else ""
                cols += [f"{d['bleu4_mean']:.2f} ± {d['bleu4_std']:.2f}{suffix}",
                         f"{d['rouge_l_mean']:.2f} ± {d['rouge_l_std']:.2f}"]
            rows.append(cols)
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        lines = [" | ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines)


def train_and_evaluate(
    cell: AblationCell,
    seed: int,
    data: DataBundle,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    eval_split: str = "test",
    decode_mode: str = "beam",
) -> dict:
    pretrained = None
    if cell.pretrain:
        pre = pretrain(cell.apply(replace(pretrain_cfg, seed=seed)), data, model_cfg=model_cfg)
        pretrained = pre.checkpoint(include_optimizer=False)
    ft = finetune(replace(finetune_cfg, seed=seed), data, pretrained, model_cfg=model_cfg)
    records = translate(ft.model, data[eval_split], data.vocab, mode=decode_mode, beam_size=finetune_cfg.beam_size,
                        max_len=finetune_cfg.max_len, length_penalty=finetune_cfg.length_penalty,
                        augment=data.augment if finetune_cfg.augment else None)
    return score_records(records)


def run_ablation(
    cells: Sequence[AblationCell],
    data: DataBundle,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    layout: str = "components",
    model_cfg: ModelConfig | None = None,
    decode_mode: str = "beam",
    runner: Callable[..., dict] = train_and_evaluate,
) -> AblationReport:
    """Train and evaluate every cell for every seed on the same data.

    A crash in one (cell, seed) run is recorded on that cell and the sweep
    moves on.
    """
    results = []
    for cell in cells:
        res = CellResult(cell)
        for seed in seeds:
            try:
                scores = runner(cell, seed, data, pretrain_cfg, finetune_cfg, model_cfg=model_cfg,
                                decode_mode=decode_mode)
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                log.exception("cell %s seed %s failed", cell.name, seed)
                res.errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                continue
            res.seeds.append(seed)
            res.bleu4.append(scores["bleu4"])
            res.rouge_l.append(scores["rouge_l"])
        results.append(res)
    return AblationReport(layout, results)
