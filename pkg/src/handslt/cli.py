"""Command-line entry point: ``handslt <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from handslt.errors import ConfigurationError, HandSLTError

log = logging.getLogger("handslt")

API_KEY_ENV = "HANDSLT_API_KEY"


def load_config(path) -> dict:
    if path is None:
        return {}
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return raw


def _train_config(args, section: str, phase: str):
    from handslt.training import TrainConfig, schedule_epochs

    raw = dict(args.config_data.get(section, {}))
    schedule = raw.pop("schedule", "desk")
    raw.setdefault("epochs", schedule_epochs(schedule, phase))
    raw["phase"] = phase
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        raw["epochs"] = args.epochs
    if getattr(args, "max_steps", None) is not None:
        raw["max_steps"] = args.max_steps
    return TrainConfig.from_dict(raw)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_progress(summary: dict) -> None:
    keys = [k for k in summary if k not in ("steps",)]
    print("  ".join(f"{k}={summary[k]:.4g}" if isinstance(summary[k], float) else f"{k}={summary[k]}" for k in keys),
          flush=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    from handslt.data import PRESETS, generate_dataset

    if args.preset not in PRESETS:
        raise ConfigurationError(f"unknown dataset preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[args.preset]
    overrides = dict(args.config_data.get("data", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, **{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    root = generate_dataset(cfg, _out_dir(args, "data"))
    print(f"wrote {args.preset} dataset to {root}")
    return 0


def cmd_describe(args) -> int:
    from handslt.descriptor import DescriptionCache, Describer, HttpBackend, MockBackend, RetryPolicy, describe_dataset

    opts = dict(args.config_data.get("describe", {}))
    backend_name = args.backend or opts.get("backend", "mock")
    retry = RetryPolicy(**opts.get("retry", {}))
    if backend_name == "mock":
        backend = MockBackend(rate_limit=opts.get("rate_limit"), retry=retry)
    elif backend_name == "http":
        endpoint = args.endpoint or opts.get("endpoint")
        if not endpoint:
            raise ConfigurationError("the http backend needs --endpoint")
        backend = HttpBackend(endpoint, api_key=os.environ.get(args.api_key_env), model_id=opts.get("model_id", "remote"),
                              timeout=opts.get("timeout", 60.0), retry=retry, rate_limit=opts.get("rate_limit"))
    else:
        raise ConfigurationError(f"unknown backend {backend_name!r}")
    cache_dir = args.cache or opts.get("cache") or Path(args.data) / ".describe-cache"
    describer = Describer(backend, DescriptionCache(cache_dir), max_concurrency=args.concurrency)
    out = Path(args.out_dir) / "descriptions.jsonl" if args.out_dir else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
    docs = describe_dataset(args.data, describer, splits=args.splits, out_path=out, write_back=args.write_back)
    s = describer.stats
    print(f"described {len(docs)} videos: {s.attempts} backend calls, {s.failures} failures, {s.cache_hits} cache hits")
    return 0


def cmd_pretrain(args) -> int:
    from handslt.checkpoint import load_checkpoint
    from handslt.training import DataBundle, Trainer

    cfg = _train_config(args, "pretrain", "pretrain")
    out = _out_dir(args, "runs/pretrain")
    data = DataBundle.load(args.data, splits=("train", "val"), require_teacher=cfg.active_terms["l_distill"])
    if args.resume:
        trainer = Trainer.resume(load_checkpoint(args.resume), data, out_dir=out, epochs=cfg.epochs)
    else:
        trainer = Trainer(cfg, data, out_dir=out)
    trainer.fit(_print_progress)
    print(f"best validation loss {trainer.best_metric} at epoch {trainer.best_epoch}; "
          f"checkpoint {out / 'pretrain_best.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    from handslt.checkpoint import load_checkpoint
    from handslt.training import DataBundle, Trainer

    cfg = _train_config(args, "finetune", "finetune")
    out = _out_dir(args, "runs/finetune")
    data = DataBundle.load(args.data, splits=("train", "val"))
    if args.resume:
        trainer = Trainer.resume(load_checkpoint(args.resume), data, out_dir=out, epochs=cfg.epochs)
    else:
        pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
        from handslt.training import finetune

        trainer = finetune(cfg, data, pretrained, out_dir=out, progress=_print_progress)
        print(f"best validation BLEU-4 {trainer.best_metric} at epoch {trainer.best_epoch}; "
              f"checkpoint {out / 'finetune_best.ckpt'}" + (" [baseline]" if "baseline" in trainer.tags else ""))
        return 0
    trainer.fit(_print_progress)
    print(f"best validation BLEU-4 {trainer.best_metric} at epoch {trainer.best_epoch}")
    return 0


def cmd_translate(args) -> int:
    from handslt.checkpoint import load_checkpoint
    from handslt.data import AugmentConfig, load_dataset
    from handslt.training import model_from_checkpoint, translate

    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = model_from_checkpoint(ckpt)
    samples = list(load_dataset(args.data, args.split, require_teacher=False))
    aug = None
    if ckpt.config["train"].get("augment", True):
        size = samples[0].frames.shape[-1]
        aug = AugmentConfig(size + size // 8, size)
    records = translate(model, samples, vocab, mode=args.mode, beam_size=args.beam_size, max_len=args.max_len,
                        length_penalty=args.length_penalty, augment=aug)
    out = Path(args.output) if args.output else _out_dir(args, "runs/translate") / f"{args.split}_hypotheses.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"wrote {len(records)} hypotheses to {out}")
    return 0


def render_scores(report: dict) -> str:
    cols = ["B-1", "B-2", "B-3", "B-4", "R"]
    vals = [f"{report[k]:.2f}" for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l")]
    widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    return "\n".join([
        " | ".join(c.ljust(w) for c, w in zip(cols, widths)),
        "-+-".join("-" * w for w in widths),
        " | ".join(v.ljust(w) for v, w in zip(vals, widths)),
    ])


def cmd_evaluate(args) -> int:
    from handslt.metrics import diff_gallery_html
    from handslt.training import score_records

    with open(args.hypotheses, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    report = score_records(records)
    print(render_scores(report))
    out = _out_dir(args, ".") if args.out_dir else args.hypotheses.parent
    (out / "scores.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(f"scores written to {out / 'scores.json'}")
    if args.diff_report:
        Path(args.diff_report).write_text(diff_gallery_html(records), encoding="utf-8")
        print(f"diff report written to {args.diff_report}")
    return 0


def cmd_ablate(args) -> int:
    from handslt.training import GRIDS, DataBundle, run_ablation

    pre_cfg = _train_config(args, "pretrain", "pretrain")
    ft_cfg = _train_config(args, "finetune", "finetune")
    if args.pretrain_epochs is not None:
        pre_cfg = replace(pre_cfg, epochs=args.pretrain_epochs)
    if args.finetune_epochs is not None:
        ft_cfg = replace(ft_cfg, epochs=args.finetune_epochs)
    cells = GRIDS[args.grid]
    if args.cells:
        cells = tuple(c for c in cells if c.name.strip("()") in args.cells)
    needs_teacher = any(c.pretrain and c.distill and c.lambda_distill > 0 for c in cells)
    data = DataBundle.load(args.data, require_teacher=needs_teacher)
    report = run_ablation(cells, data, pre_cfg, ft_cfg, seeds=args.seeds, layout=args.grid, decode_mode=args.mode)
    out = _out_dir(args, "runs/ablate")
    (out / f"ablation_{args.grid}.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    table = report.render()
    (out / f"ablation_{args.grid}.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file with per-subcommand sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="handslt", description="Hand-aware sign language translation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic sign dataset")
    p.add_argument("--preset", default="default")
    p.add_argument("--out", dest="out_dir", type=Path, help="same as --out-dir")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("describe", parents=[common], help="produce segment-level motion descriptions")
    p.add_argument("--input", "--data", dest="data", required=True, type=Path, help="dataset directory")
    p.add_argument("--backend", choices=["mock", "http"])
    p.add_argument("--endpoint")
    p.add_argument("--api-key-env", default=API_KEY_ENV, help="environment variable holding the API key")
    p.add_argument("--cache-dir", "--cache", dest="cache", type=Path)
    p.add_argument("--max-concurrency", "--concurrency", dest="concurrency", type=int, default=1)
    p.add_argument("--splits", nargs="+", default=["train", "val", "test"])
    p.add_argument("--write-back", action="store_true", help="overwrite each sample's description.txt")
    p.set_defaults(func=cmd_describe)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a dataset")
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--resume", type=Path, help="continue from a *_last.ckpt archive")
        if name == "finetune":
            p.add_argument("--pretrained", type=Path, help="pre-training checkpoint; omit for the baseline")
        p.set_defaults(func=func)

    p = sub.add_parser("translate", parents=[common], help="decode a split with a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["greedy", "beam"], default="beam")
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="score a hypotheses file")
    p.add_argument("--hypotheses", required=True, type=Path)
    p.add_argument("--diff-report", type=Path, help="write an HTML gallery of highlighted differences")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid over several seeds")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--grid", choices=["components", "weights"], default="components")
    p.add_argument("--cells", nargs="+", help="subset of row numbers, e.g. 1 5")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--mode", choices=["greedy", "beam"], default="beam")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.config_data = load_config(args.config)
        return args.func(args)
    except HandSLTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
