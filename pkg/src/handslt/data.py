"""Synthetic sign-video dataset: generation, on-disk format, loading and augmentation.

Each gesture is a pair of coloured "hands" with a fixed shape that translate
along a gesture-specific path over ``frames_per_gesture`` frames, drawn on a
static signer silhouette.  A sample strings several gestures together; its
target sentence is the gesture words, its description is a templated
hand-motion narrative, and its teacher features come from
:func:`handslt.visual.synthetic_teacher`.

Layout on disk::

    <root>/dataset.json            generator config and gesture table
    <root>/vocab.json              shared token vocabulary
    <root>/<split>/manifest.jsonl  one {sample_id, num_frames, target} per line
    <root>/<split>/<sample_id>/frames.bin       float32 LE, T x C x H x W
    <root>/<split>/<sample_id>/hamer.bin        float32 LE, T x 288
    <root>/<split>/<sample_id>/target.txt
    <root>/<split>/<sample_id>/description.txt
    <root>/<split>/<sample_id>/meta.json
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from handslt.errors import ConfigurationError, IngestionError, ShapeError, ValidationError
from handslt.translator import Vocabulary
from handslt.visual import TEACHER_DIM, HandTeacherFeatures, synthetic_teacher

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1

GESTURE_WORDS = (
    "sun", "cloud", "rain", "snow", "wind", "storm", "fog", "cold", "warm", "north",
    "south", "east", "west", "morning", "evening", "tomorrow", "today", "strong", "weak", "mountain",
    "coast", "river", "night", "day", "sky", "ice", "heat", "frost", "shower", "thunder",
)
HAND_SHAPES = ("flat palm", "fist", "pointing finger", "open claw", "pinch", "v shape", "bent hand", "thumb up")
DIRECTIONS = {(0, -1): "upward", (0, 1): "downward", (-1, 0): "to the left", (1, 0): "to the right"}
CONNECTIVES = ("first", "then", "finally")


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_gestures: int = 20
    frames_per_gesture: int = 8
    sentence_length_range: tuple[int, int] = (3, 6)
    train_size: int = 500
    val_size: int = 50
    test_size: int = 100
    frame_size: tuple[int, int, int] = (3, 64, 64)
    noise_std: float = 0.05
    teacher_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_gestures < 2:
            raise ConfigurationError("need at least two gestures to have anything to translate")
        lo, hi = self.sentence_length_range
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad sentence_length_range {self.sentence_length_range}")
        if min(self.train_size, self.val_size, self.test_size, self.frames_per_gesture) < 1:
            raise ConfigurationError("split sizes and frames_per_gesture must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.frame_size[0] != 3 or min(self.frame_size[1:]) < 16:
            raise ConfigurationError("frames must be RGB and at least 16x16")

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]


PRESETS = {
    "default": SyntheticDatasetConfig(),
    "tiny": SyntheticDatasetConfig(
        num_gestures=6, frames_per_gesture=4, sentence_length_range=(2, 4),
        train_size=24, val_size=6, test_size=8, frame_size=(3, 32, 32),
    ),
}


def gesture_word(gesture_id: int) -> str:
    return GESTURE_WORDS[gesture_id] if gesture_id < len(GESTURE_WORDS) else f"sign{gesture_id}"


@dataclass(frozen=True)
class GestureSpec:
    gesture_id: int
    word: str
    dominant: str  # "left" | "right"
    shape: str
    direction: str
    colors: np.ndarray = field(repr=False)  # (2, 3)
    masks: np.ndarray = field(repr=False)  # (2, s, s) bool
    starts: np.ndarray = field(repr=False)  # (2, 2) x, y
    steps: np.ndarray = field(repr=False)  # (2, 2) per-frame displacement


def _blob(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random connected-ish blob: union of a few ellipses."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(3):
        cx, cy = rng.uniform(0.25 * size, 0.75 * size, size=2)
        rx, ry = rng.uniform(0.15 * size, 0.45 * size, size=2)
        mask |= ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return mask


def make_gesture_specs(cfg: SyntheticDatasetConfig) -> list[GestureSpec]:
    _, h, w = cfg.frame_size
    hand = max(4, h // 5)
    travel = max(2, h // 4)
    specs = []
    for g in range(cfg.num_gestures):
        rng = np.random.default_rng([cfg.seed, g, 0x6E57])
        dominant = ("left", "right")[g % 2]
        direction = list(DIRECTIONS)[(g // 2) % 4]
        colors = rng.uniform(0.05, 0.95, size=(2, 3))
        masks = np.stack([_blob(rng, hand), _blob(rng, hand)])
        starts = np.empty((2, 2))
        steps = np.empty((2, 2))
        for k in range(2):
            # left hand lives in the left half of the frame, right hand in the right half
            x_lo, x_hi = (0, w // 2 - hand) if k == 0 else (w // 2, w - hand)
            d = np.array(direction, dtype=float) * (travel if ("left", "right")[k] == dominant else travel / 3)
            lo = np.array([x_lo, 0.0]) - np.minimum(d, 0)
            hi = np.array([x_hi, h - hand]) - np.maximum(d, 0)
            starts[k] = rng.uniform(lo, np.maximum(lo, hi))
            steps[k] = d / max(cfg.frames_per_gesture - 1, 1)
        specs.append(
            GestureSpec(
                g, gesture_word(g), dominant, HAND_SHAPES[int(rng.integers(len(HAND_SHAPES)))],
                DIRECTIONS[direction], colors, masks, starts, steps,
            )
        )
    return specs


def background(frame_size) -> np.ndarray:
    c, h, w = frame_size
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    bg = np.full((c, h, w), 0.3, dtype=np.float32)
    torso = ((xx - 0.5) / 0.32) ** 2 + ((yy - 1.0) / 0.45) ** 2 <= 1.0
    head = ((xx - 0.5) / 0.12) ** 2 + ((yy - 0.3) / 0.15) ** 2 <= 1.0
    bg[:, torso] = 0.45
    bg[:, head] = np.array([0.6, 0.5, 0.45], dtype=np.float32)[:, None]
    return bg


def render_gesture(spec: GestureSpec, frames_per_gesture: int, frame_size) -> np.ndarray:
    """Noise-free frames ``(F, C, H, W)`` of one gesture."""
    bg = background(frame_size)
    _, h, w = frame_size
    size = spec.masks.shape[-1]
    out = np.repeat(bg[None], frames_per_gesture, axis=0)
    for t in range(frames_per_gesture):
        for k in range(2):
            x, y = np.rint(spec.starts[k] + t * spec.steps[k]).astype(int)
            x = int(np.clip(x, 0, w - size))
            y = int(np.clip(y, 0, h - size))
            region = out[t, :, y : y + size, x : x + size]
            region[:, spec.masks[k]] = spec.colors[k][:, None]
    return out


def describe_gestures(specs: list[GestureSpec]) -> str:
    """Temporally ordered templated description mentioning each gesture word in order."""
    parts = []
    for i, spec in enumerate(specs):
        if i == 0:
            lead = CONNECTIVES[0]
        elif i == len(specs) - 1:
            lead = CONNECTIVES[2]
        else:
            lead = CONNECTIVES[1]
        parts.append(
            f"{lead} the {spec.dominant} hand makes a {spec.shape} and moves {spec.direction} signing {spec.word}"
        )
    return " ".join(parts)


def template_vocabulary(specs: list[GestureSpec]) -> Vocabulary:
    words = set(CONNECTIVES) | {"the", "hand", "makes", "a", "and", "moves", "signing", "left", "right"}
    for shape in HAND_SHAPES:
        words.update(shape.split())
    for d in DIRECTIONS.values():
        words.update(d.split())
    words.update(s.word for s in specs)
    return Vocabulary(sorted(words))


@dataclass
class Sample:
    sample_id: str
    frames: np.ndarray  # (T, C, H, W) float32
    target: str
    description: str
    teacher: HandTeacherFeatures | None
    gesture_ids: list[int] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _sentences(cfg: SyntheticDatasetConfig, rng: np.random.Generator, n: int, taken: set) -> list[tuple[int, ...]]:
    lo, hi = cfg.sentence_length_range
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n + 10000:
            raise ConfigurationError("cannot draw enough distinct sentences for the requested split sizes")
        length = int(rng.integers(lo, hi + 1))
        sent = [int(rng.integers(cfg.num_gestures))]
        while len(sent) < length:
            g = int(rng.integers(cfg.num_gestures - 1))
            sent.append(g if g < sent[-1] else g + 1)  # no immediate repeats
        sent = tuple(sent)
        if sent not in taken:
            taken.add(sent)
            out.append(sent)
    return out


def build_sample(
    cfg: SyntheticDatasetConfig, specs: list[GestureSpec], gestures, sample_id: str, noise_seed
) -> Sample:
    fpg = cfg.frames_per_gesture
    clean = np.concatenate([render_gesture(specs[g], fpg, cfg.frame_size) for g in gestures])
    rng = np.random.default_rng(noise_seed)
    noisy = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape) if cfg.noise_std > 0 else clean
    frames = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    per_frame_ids = [g for g in gestures for _ in range(fpg)]
    jitter_seed = int(np.random.SeedSequence(noise_seed).generate_state(1)[0])
    teacher = synthetic_teacher(per_frame_ids, cfg.seed, cfg.num_gestures, cfg.teacher_jitter, jitter_seed)
    chosen = [specs[g] for g in gestures]
    return Sample(
        sample_id, frames, " ".join(s.word for s in chosen), describe_gestures(chosen), teacher, list(gestures)
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_sample(sample: Sample, sample_dir: Path) -> dict:
    sample_dir.mkdir(parents=True, exist_ok=True)
    sample.frames.astype("<f4").tofile(sample_dir / "frames.bin")
    if sample.teacher is not None:
        sample.teacher.per_frame.astype("<f4").tofile(sample_dir / "hamer.bin")
    (sample_dir / "target.txt").write_text(sample.target + "\n", encoding="utf-8")
    (sample_dir / "description.txt").write_text(sample.description + "\n", encoding="utf-8")
    meta = {
        "sample_id": sample.sample_id,
        "num_frames": sample.num_frames,
        "frame_shape": list(sample.frames.shape[1:]),
        "dtype": "float32",
        "byte_order": "little",
        "hamer_shape": [sample.num_frames, TEACHER_DIM] if sample.teacher is not None else None,
        "gesture_ids": sample.gesture_ids,
    }
    _write_json(sample_dir / "meta.json", meta)
    return {"sample_id": sample.sample_id, "num_frames": sample.num_frames, "target": sample.target}


def generate_dataset(cfg: SyntheticDatasetConfig, out_dir) -> Path:
    """Write a full synthetic dataset to ``out_dir`` (deterministic given ``cfg.seed``)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    specs = make_gesture_specs(cfg)
    rng = np.random.default_rng([cfg.seed, 0x5E7])
    taken: set = set()
    for split_no, split in enumerate(SPLITS):
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        records = []
        for i, gestures in enumerate(_sentences(cfg, rng, cfg.split_size(split), taken)):
            sample_id = f"{split}_{i:05d}"
            sample = build_sample(cfg, specs, gestures, sample_id, [cfg.seed, split_no, i])
            records.append(write_sample(sample, split_dir / sample_id))
        with open(split_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    cfg_dict = asdict(cfg)
    _write_json(
        root / "dataset.json",
        {
            "format_version": FORMAT_VERSION,
            "config": cfg_dict,
            "gestures": [
                {"id": s.gesture_id, "word": s.word, "hand": s.dominant, "shape": s.shape, "direction": s.direction}
                for s in specs
            ],
        },
    )
    template_vocabulary(specs).save(root / "vocab.json")
    return root


def dataset_config(root) -> SyntheticDatasetConfig:
    raw = json.loads((Path(root) / "dataset.json").read_text(encoding="utf-8"))["config"]
    raw["sentence_length_range"] = tuple(raw["sentence_length_range"])
    raw["frame_size"] = tuple(raw["frame_size"])
    return SyntheticDatasetConfig(**raw)


def load_vocab(root) -> Vocabulary:
    path = Path(root) / "vocab.json"
    if not path.exists():
        raise IngestionError(f"missing vocabulary file {path}", path=path)
    return Vocabulary.load(path)


def read_manifest(root, split: str) -> list[dict]:
    path = Path(root) / split / "manifest.jsonl"
    if not path.exists():
        raise IngestionError(f"missing manifest {path}", path=path)
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _read_f32(path: Path, shape, sample_id: str) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"{sample_id}: missing {path.name}", path=path, sample_id=sample_id)
    expected = int(np.prod(shape)) * 4
    size = path.stat().st_size
    if size != expected:
        raise ValidationError(f"{sample_id}: {path.name} has {size} bytes, expected {expected} for shape {shape}")
    return np.fromfile(path, dtype="<f4").reshape(shape)


def read_sample(sample_dir, require_teacher: bool = True) -> Sample:
    sample_dir = Path(sample_dir)
    sample_id = sample_dir.name
    meta_path = sample_dir / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IngestionError(f"{sample_id}: missing meta.json", path=meta_path, sample_id=sample_id) from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{sample_id}: corrupt meta.json ({exc})", path=meta_path, sample_id=sample_id) from exc
    if meta.get("dtype") != "float32" or meta.get("byte_order", "little") != "little":
        raise ValidationError(f"{sample_id}: unsupported dtype/byte order in meta.json")
    sample_id = meta.get("sample_id", sample_id)
    t = int(meta["num_frames"])
    frames = _read_f32(sample_dir / "frames.bin", (t, *meta["frame_shape"]), sample_id)
    teacher = None
    if meta.get("hamer_shape") is not None or require_teacher:
        hamer_shape = meta.get("hamer_shape") or [t, TEACHER_DIM]
        if tuple(hamer_shape) != (t, TEACHER_DIM):
            raise ValidationError(f"{sample_id}: hamer shape {hamer_shape} does not match {t} frames")
        teacher = HandTeacherFeatures(_read_f32(sample_dir / "hamer.bin", hamer_shape, sample_id))
    texts = {}
    for name in ("target", "description"):
        path = sample_dir / f"{name}.txt"
        if not path.exists():
            raise IngestionError(f"{sample_id}: missing {path.name}", path=path, sample_id=sample_id)
        texts[name] = path.read_text(encoding="utf-8").strip()
    return Sample(sample_id, frames, texts["target"], texts["description"], teacher, list(meta.get("gesture_ids", [])))


def load_dataset(root, split: str, shuffle_seed: int | None = None, require_teacher: bool = True) -> Iterator[Sample]:
    """Lazily yield the samples of ``split`` (manifest order, or a seeded permutation)."""
    records = read_manifest(root, split)
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for idx in order:
        rec = records[int(idx)]
        sample = read_sample(Path(root) / split / rec["sample_id"], require_teacher=require_teacher)
        if sample.num_frames != rec["num_frames"]:
            raise ValidationError(f"{rec['sample_id']}: manifest says {rec['num_frames']} frames, found {sample.num_frames}")
        yield sample


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    resize: int = 72
    crop: int = 64

    def __post_init__(self):
        if self.crop > self.resize:
            raise ConfigurationError(f"crop {self.crop} is larger than resize {self.resize}")


AUGMENT_PRESETS = {"default": AugmentConfig(72, 64), "tiny": AugmentConfig(36, 32), "paper-dims": AugmentConfig(256, 224)}


def augment(frames, mode: str, cfg: AugmentConfig = AugmentConfig(), rng: np.random.Generator | None = None) -> torch.Tensor:
    """Resize every frame to ``cfg.resize`` then crop ``cfg.crop``.

    Training draws one crop offset per video (shared by all its frames);
    evaluation takes the centre crop.
    """
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames)
    if x.dim() != 4:
        raise ShapeError(f"expected (T, C, H, W) frames, got {tuple(x.shape)}")
    span = cfg.resize - cfg.crop
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        top, left = (int(v) for v in rng.integers(0, span + 1, size=2))
    elif mode == "eval":
        top = left = span // 2
    else:
        raise ConfigurationError(f"unknown augmentation mode {mode!r}")
    # bilinear resizing is separable, so only the rows and columns inside the crop are computed
    rows = _resize_matrix(x.shape[-2], cfg.resize, x.dtype)[top : top + cfg.crop]
    cols = _resize_matrix(x.shape[-1], cfg.resize, x.dtype)[left : left + cfg.crop]
    return (rows @ x @ cols.T).contiguous()


@functools.lru_cache(maxsize=32)
def _resize_matrix(size: int, new_size: int, dtype: torch.dtype) -> torch.Tensor:
    """``(new_size, size)`` matrix applying 1-D bilinear resizing (half-pixel centres)."""
    if size == new_size:
        return torch.eye(size, dtype=dtype)
    eye = torch.eye(size, dtype=torch.float64)[None]
    return F.interpolate(eye, size=new_size, mode="linear", align_corners=False)[0].T.to(dtype)
