import zipfile

import pytest
import torch

from handslt.checkpoint import Checkpoint, checkpoint_bytes, load_checkpoint, load_module, save_checkpoint
from handslt.errors import IncompatibleCheckpointError, ValidationError
from handslt.training import TrainConfig, Trainer


def tiny_cfg(**kw):
    base = dict(model_preset="tiny", batch_size=4, epochs=3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_mixed_dtype_round_trip(tmp_path):
    tensors = {
        "a": torch.randn(3, 4),
        "b": torch.randn(2, dtype=torch.float64),
        "c": torch.arange(5),
        "d": torch.tensor([True, False]),
        "e": torch.randint(0, 255, (7,), dtype=torch.uint8),
        "f": torch.tensor(1.5),
    }
    ckpt = Checkpoint(tensors, {"k": [1, 2]}, epoch=2, global_step=9, extra={"x": None})
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.config == ckpt.config and (back.epoch, back.global_step) == (2, 9) and back.extra == {"x": None}
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and torch.equal(back.tensors[k], v)
    assert checkpoint_bytes(back) == (tmp_path / "c.ckpt").read_bytes()


def test_archive_layout(tmp_path):
    path = save_checkpoint(Checkpoint({"w": torch.ones(2)}), tmp_path / "x.ckpt")
    with zipfile.ZipFile(path) as zf:
        assert zf.namelist() == ["meta.json", "tensors/00000.bin"]
        assert zf.read("tensors/00000.bin") == b"\x00\x00\x80\x3f" * 2  # little-endian float32 1.0


def test_trainer_checkpoint_save_load_save(tmp_path, tiny_data):
    t = Trainer(tiny_cfg(), tiny_data)
    for _ in range(2):
        t.train_step()
    first = checkpoint_bytes(t.checkpoint())
    (tmp_path / "a.ckpt").write_bytes(first)
    assert checkpoint_bytes(load_checkpoint(tmp_path / "a.ckpt")) == first


def test_resume_reproduces_trajectory(tmp_path, tiny_data):
    straight = Trainer(tiny_cfg(), tiny_data)
    full = [straight.train_step() for _ in range(14)]

    first = Trainer(tiny_cfg(), tiny_data)
    head = [first.train_step() for _ in range(4)]
    save_checkpoint(first.checkpoint(), tmp_path / "mid.ckpt")
    torch.manual_seed(999)  # the resumed run must not depend on ambient RNG state
    resumed = Trainer.resume(load_checkpoint(tmp_path / "mid.ckpt"), tiny_data)
    tail = [resumed.train_step() for _ in range(10)]
    assert head + tail == full
    for (k, a), b in zip(straight.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), k


def test_finetune_resume_reproduces_trajectory(tmp_path, tiny_data):
    cfg = tiny_cfg(phase="finetune")
    straight = Trainer(cfg, tiny_data)
    full = [straight.train_step()["l_slt"] for _ in range(12)]
    first = Trainer(cfg, tiny_data)
    head = [first.train_step()["l_slt"] for _ in range(2)]
    resumed = Trainer.resume(Checkpoint(**vars(first.checkpoint())), tiny_data)
    tail = [resumed.train_step()["l_slt"] for _ in range(10)]
    assert head + tail == full


def test_incompatible_module():
    lin = torch.nn.Linear(3, 2)
    with pytest.raises(IncompatibleCheckpointError) as info:
        load_module(lin, {"weight": torch.zeros(2, 3)})
    assert info.value.missing == ["bias"]
    with pytest.raises(IncompatibleCheckpointError):
        load_module(lin, {"weight": torch.zeros(3, 3), "bias": torch.zeros(2)})


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "junk")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "missing")
