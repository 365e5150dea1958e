"""Deterministic checkpoint archives.

A checkpoint is a zip file (stored, fixed timestamps, fixed member order)
holding ``meta.json`` and one raw little-endian payload per tensor. Saving
the same state twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from handslt.errors import IncompatibleCheckpointError, ValidationError

FORMAT = "handslt-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "uint8": (torch.uint8, "|u1"),
    "bool": (torch.bool, "|b1"),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    global_step: int = 0
    extra: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _BY_TORCH:
        raise ValidationError(f"unsupported tensor dtype {t.dtype}")
    name = _BY_TORCH[t.dtype]
    return name, t.numpy().astype(_DTYPES[name][1], copy=False).tobytes()


def _zipinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    payloads = []
    for i, name in enumerate(sorted(ckpt.tensors)):
        dtype, raw = _tensor_bytes(ckpt.tensors[name])
        member = f"tensors/{i:05d}.bin"
        entries.append({"name": name, "shape": list(ckpt.tensors[name].shape), "dtype": dtype, "file": member})
        payloads.append((member, raw))
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_zipinfo("meta.json"), json.dumps(meta, sort_keys=True, indent=1).encode("utf-8"))
        for member, raw in payloads:
            zf.writestr(_zipinfo(member), raw)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise ValidationError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValidationError(f"{path} is not a checkpoint archive")
        tensors = {}
        for e in meta["tensors"]:
            tdtype, np_dtype = _DTYPES[e["dtype"]]
            arr = np.frombuffer(zf.read(e["file"]), dtype=np_dtype).reshape(e["shape"])
            tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(tdtype)
    return Checkpoint(tensors, meta["config"], meta["epoch"], meta["global_step"], meta["extra"])


# ---------------------------------------------------------------------------
# state flattening
# ---------------------------------------------------------------------------


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], strict: bool = True) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    if missing and strict:
        raise IncompatibleCheckpointError(missing)
    bad = [k for k in own if k in tensors and tuple(own[k].shape) != tuple(tensors[k].shape)]
    if bad:
        raise IncompatibleCheckpointError(bad)
    module.load_state_dict({k: v for k, v in tensors.items() if k in own}, strict=False)


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], list[dict]]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            t = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            tensors[f"optim/{idx}/{key}"] = t
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def load_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    state: dict[int, dict] = {}
    for name, t in ckpt.section("optim").items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = t
    groups = ckpt.extra.get("optimizer_groups")
    if groups is None:
        raise IncompatibleCheckpointError(["optimizer_groups"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def rng_tensors() -> dict[str, torch.Tensor]:
    return {"rng/torch": torch.get_rng_state()}


def restore_rng(ckpt: Checkpoint) -> None:
    if "rng/torch" in ckpt.tensors:
        torch.set_rng_state(ckpt.tensors["rng/torch"].to(torch.uint8))
