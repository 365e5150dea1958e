import json

import pytest
import yaml

from handslt.checkpoint import load_checkpoint
from handslt.cli import main, render_scores


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "pretrain": {"model_preset": "tiny", "batch_size": 4},
        "finetune": {"model_preset": "tiny", "batch_size": 4, "max_len": 8},
        "describe": {"retry": {"max_attempts": 2, "backoff": 0.0}},
    }
    (root / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["generate-data", "--preset", "tiny", "--out", str(root / "data"), "--seed", "0"]) == 0
    return root


def test_generate_data(workspace):
    assert (workspace / "data" / "train" / "manifest.jsonl").exists()


def test_describe_twice(workspace, capsys):
    args = ["describe", "--input", str(workspace / "data"), "--backend", "mock", "--cache-dir",
            str(workspace / "cache"), "--max-concurrency", "2", "--config", str(workspace / "cfg.yaml")]
    assert main(args + ["--out-dir", str(workspace / "d1")]) == 0
    first = capsys.readouterr().out
    assert main(args + ["--out-dir", str(workspace / "d2")]) == 0
    second = capsys.readouterr().out
    assert "0 backend calls" not in first and "0 backend calls" in second
    a = (workspace / "d1" / "descriptions.jsonl").read_bytes()
    assert a == (workspace / "d2" / "descriptions.jsonl").read_bytes()
    assert len(a.splitlines()) == 24 + 6 + 8


def test_pretrain_finetune_translate_evaluate(workspace, capsys):
    common = ["--config", str(workspace / "cfg.yaml"), "--seed", "0"]
    data = str(workspace / "data")
    assert main(["pretrain", "--data", data, "--epochs", "1", "--out-dir", str(workspace / "pre")] + common) == 0
    ckpt = workspace / "pre" / "pretrain_best.ckpt"
    assert ckpt.exists()
    assert main(["finetune", "--data", data, "--pretrained", str(ckpt), "--epochs", "1",
                 "--out-dir", str(workspace / "ft")] + common) == 0
    best = workspace / "ft" / "finetune_best.ckpt"
    assert load_checkpoint(best).extra["has_decoder"]
    hyp = workspace / "hyp.jsonl"
    assert main(["translate", "--checkpoint", str(best), "--data", data, "--split", "test", "--mode", "beam",
                 "--beam-size", "2", "--max-len", "8", "--output", str(hyp)]) == 0
    records = [json.loads(line) for line in hyp.read_text().splitlines()]
    assert len(records) == 8 and set(records[0]) == {"sample_id", "hypothesis", "reference"}
    capsys.readouterr()
    report = workspace / "gallery.html"
    assert main(["evaluate", "--hypotheses", str(hyp), "--diff-report", str(report),
                 "--out-dir", str(workspace / "eval")]) == 0
    out = capsys.readouterr().out
    assert "B-4" in out and report.read_text().startswith("<")
    scores = json.loads((workspace / "eval" / "scores.json").read_text())
    assert set(scores) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "num_samples"}


def test_resume_via_cli(workspace):
    common = ["--config", str(workspace / "cfg.yaml"), "--seed", "0"]
    data = str(workspace / "data")
    last = workspace / "pre" / "pretrain_last.ckpt"
    assert main(["pretrain", "--data", data, "--resume", str(last), "--epochs", "2",
                 "--out-dir", str(workspace / "pre2")] + common) == 0
    assert load_checkpoint(workspace / "pre2" / "pretrain_last.ckpt").global_step == 12


def test_baseline_finetune_and_ablate(workspace, capsys):
    common = ["--config", str(workspace / "cfg.yaml")]
    data = str(workspace / "data")
    assert main(["finetune", "--data", data, "--max-steps", "1", "--out-dir", str(workspace / "base")] + common) == 0
    assert "[baseline]" in capsys.readouterr().out
    assert main(["ablate", "--data", data, "--grid", "components", "--cells", "1", "2", "--seeds", "0",
                 "--pretrain-epochs", "1", "--finetune-epochs", "1", "--mode", "greedy",
                 "--out-dir", str(workspace / "abl")] + common) == 0
    rendered = (workspace / "abl" / "ablation_components.txt").read_text()
    assert len(rendered.strip().splitlines()) == 4
    report = json.loads((workspace / "abl" / "ablation_components.json").read_text())
    assert [c["cell"]["name"] for c in report["cells"]] == ["(1)", "(2)"]
    assert not any(c["failed"] for c in report["cells"])


def test_errors_exit_nonzero(workspace, capsys):
    assert main(["generate-data", "--preset", "nope", "--out-dir", str(workspace / "x")]) == 2
    assert main(["describe", "--input", str(workspace / "data"), "--backend", "http"]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["translate"])


def test_render_scores():
    text = render_scores({"bleu1": 1.0, "bleu2": 2.0, "bleu3": 3.0, "bleu4": 4.0, "rouge_l": 55.5})
    assert text.splitlines()[0].split(" | ")[0].strip() == "B-1"
    assert "55.50" in text
