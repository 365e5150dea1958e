"""Segment -> describe -> merge, with retries, rate limiting and a content-addressed cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from handslt.descriptor.backends import DescriberBackend, RateLimiter, RetryPolicy
from handslt.descriptor.segment import Segment, segment_video
from handslt.errors import BackendError, ValidationError

log = logging.getLogger(__name__)

DESCRIBE_PROMPT = "describe_v1.txt"
MERGE_PROMPT = "merge_v1.txt"


def load_prompt(name: str) -> str:
    return resources.files("handslt.descriptor").joinpath("prompts", name).read_text(encoding="utf-8")


def text_hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


@dataclass
class CallStats:
    attempts: int = 0
    failures: int = 0
    cache_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


class DescriptionCache:
    """JSON files named by the SHA-256 of their key, written atomically."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(**parts) -> str:
        return hashlib.sha256(json.dumps(parts, sort_keys=True).encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))["text"]
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, KeyError):
            log.warning("ignoring corrupt cache entry %s", path)
            return None

    def put(self, key: str, text: str, meta: dict | None = None) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump({"text": text, "meta": meta or {}}, fh, sort_keys=True, ensure_ascii=False)
        os.replace(tmp, path)


def call_with_retry(fn, policy: RetryPolicy, limiter: RateLimiter | None = None, stats: CallStats | None = None,
                    segment_index: int | None = None, sleep=time.sleep):
    """Call ``fn`` until it succeeds or ``policy.max_attempts`` is exhausted.

    ``BackendError`` raised by ``fn`` is final and not retried.
    """
    stats = stats or CallStats()
    failures = 0
    while True:
        if limiter is not None:
            limiter.acquire()
        stats.bump("attempts")
        try:
            return fn()
        except BackendError:
            stats.bump("failures")
            raise
        except Exception as exc:
            stats.bump("failures")
            failures += 1
            if failures >= policy.max_attempts:
                raise BackendError(
                    f"giving up after {failures} attempts: {exc}", segment_index=segment_index, attempts=failures
                ) from exc
            log.info("backend call failed (%s); retry %d/%d", exc, failures, policy.max_attempts - 1)
            sleep(policy.delay(failures))


@dataclass
class DescriptionDocument:
    sample_id: str
    segment_texts: list[str]
    merged_text: str
    provenance: dict

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "segment_texts": self.segment_texts,
            "merged_text": self.merged_text,
            "provenance": self.provenance,
        }


class Describer:
    """Runs a backend over videos with caching, retries and bounded concurrency."""

    def __init__(
        self,
        backend: DescriberBackend,
        cache: DescriptionCache | None = None,
        max_concurrency: int = 1,
        describe_prompt: str | None = None,
        merge_prompt: str | None = None,
        sleep=time.sleep,
    ):
        self.backend = backend
        self.cache = cache
        self.max_concurrency = max(1, max_concurrency)
        self.describe_prompt = describe_prompt if describe_prompt is not None else load_prompt(DESCRIBE_PROMPT)
        self.merge_prompt = merge_prompt if merge_prompt is not None else load_prompt(MERGE_PROMPT)
        self.prompt_hash = text_hash(self.describe_prompt, self.merge_prompt)
        self.limiter = RateLimiter(backend.rate_limit, sleep=sleep)
        self.stats = CallStats()
        self._sleep = sleep

    @property
    def provenance(self) -> dict:
        return {"backend": self.backend.name, "model": self.backend.model_id, "prompt_hash": self.prompt_hash}

    def _cached(self, key_parts: dict, compute, segment_index=None) -> str:
        key = DescriptionCache.key(**key_parts, **self.provenance) if self.cache else None
        if key is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self.stats.bump("cache_hits")
                return hit
        text = call_with_retry(compute, self.backend.retry, self.limiter, self.stats, segment_index, self._sleep)
        if key is not None:
            self.cache.put(key, text, {**key_parts, **self.provenance})
        return text

    def describe_segments(self, segments: list[Segment], sample_id: str) -> list[str]:
        def one(seg: Segment) -> str:
            return self._cached(
                {"sample_id": sample_id, "segment_index": seg.index},
                lambda: self.backend.describe(seg, sample_id, self.describe_prompt),
                seg.index,
            )

        if self.max_concurrency == 1 or len(segments) == 1:
            return [one(s) for s in segments]
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            return list(pool.map(one, segments))

    def merge(self, texts: list[str], sample_id: str = "") -> str:
        if not texts:
            raise ValidationError("nothing to merge")
        return self._cached(
            {"sample_id": sample_id, "merge": text_hash(*texts)},
            lambda: self.backend.merge(list(texts), self.merge_prompt, sample_id),
        )

    def describe_video(self, frames, sample_id: str) -> DescriptionDocument:
        texts = self.describe_segments(segment_video(frames), sample_id)
        return DescriptionDocument(sample_id, texts, self.merge(texts, sample_id), self.provenance)


def describe_segments(segments, backend: DescriberBackend, sample_id: str = "", cache=None, max_concurrency: int = 1):
    return Describer(backend, cache, max_concurrency).describe_segments(list(segments), sample_id)


def merge_descriptions(texts, backend: DescriberBackend, sample_id: str = "") -> str:
    return Describer(backend).merge(list(texts), sample_id)


def describe_dataset(
    root,
    describer: Describer,
    splits=("train", "val", "test"),
    out_path=None,
    write_back: bool = False,
) -> list[DescriptionDocument]:
    """Describe every sample of ``splits`` and write ``descriptions.jsonl``."""
    from handslt.data import read_manifest, read_sample

    root = Path(root)
    out_path = Path(out_path) if out_path else root / "descriptions.jsonl"
    docs = []
    for split in splits:
        if not (root / split / "manifest.jsonl").exists():
            continue
        for rec in read_manifest(root, split):
            sample_dir = root / split / rec["sample_id"]
            sample = read_sample(sample_dir, require_teacher=False)
            doc = describer.describe_video(sample.frames, sample.sample_id)
            docs.append(doc)
            if write_back:
                (sample_dir / "description.txt").write_text(doc.merged_text.lower() + "\n", encoding="utf-8")
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, out_path)
    return docs
