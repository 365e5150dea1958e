"""Describer backends: a deterministic mock and an HTTP client for hosted models."""

from __future__ import annotations

import base64
import hashlib
import threading
import time
from dataclasses import dataclass
from typing import Callable

import httpx
import numpy as np

from handslt.descriptor.segment import Segment
from handslt.errors import BackendError

ORDINALS = ("First,", "Then,", "Finally,")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 0.5  # seconds before the second attempt, doubled after each failure
    backoff_max: float = 8.0

    def delay(self, failures: int) -> float:
        return min(self.backoff * (2 ** (failures - 1)), self.backoff_max)


class RateLimiter:
    """Spaces calls at least ``1/rate`` seconds apart across threads."""

    def __init__(self, rate: float | None, clock: Callable[[], float] = time.monotonic, sleep=time.sleep):
        self.interval = 0.0 if not rate else 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.interval == 0.0:
            return
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self._sleep(slot - now)


class DescriberBackend:
    """Interface for anything that can describe segments and merge descriptions."""

    name = "abstract"
    model_id = ""
    rate_limit: float | None = None
    retry = RetryPolicy()

    def describe(self, segment: Segment, sample_id: str, prompt: str) -> str:
        raise NotImplementedError

    def merge(self, texts: list[str], prompt: str, sample_id: str = "") -> str:
        raise NotImplementedError


_HANDS = ("left", "right", "both")
_SHAPES = ("flat palm", "fist", "pointing finger", "open claw", "pinch", "v shape")
_MOTIONS = ("moves upward", "moves downward", "sweeps to the left", "sweeps to the right", "circles", "taps twice")


class MockBackend(DescriberBackend):
    """Offline backend whose text depends only on ``(sample_id, segment index)``."""

    name = "mock"
    model_id = "mock-describer-v1"

    def __init__(self, rate_limit: float | None = None, retry: RetryPolicy = RetryPolicy(backoff=0.0)):
        self.rate_limit = rate_limit
        self.retry = retry

    def describe(self, segment: Segment, sample_id: str, prompt: str) -> str:
        digest = hashlib.sha256(f"{sample_id}:{segment.index}".encode()).digest()
        hand = _HANDS[digest[0] % len(_HANDS)]
        shape = _SHAPES[digest[1] % len(_SHAPES)]
        motion = _MOTIONS[digest[2] % len(_MOTIONS)]
        subject = "both hands" if hand == "both" else f"the {hand} hand"
        return f"in segment {segment.index} {subject} forms a {shape} and {motion}"

    def merge(self, texts: list[str], prompt: str, sample_id: str = "") -> str:
        parts = []
        for i, text in enumerate(texts):
            if i == 0:
                marker = ORDINALS[0]
            elif i == len(texts) - 1:
                marker = ORDINALS[2]
            else:
                marker = ORDINALS[1]
            parts.append(f"{marker} {text}.")
        return " ".join(parts)


class TransientHTTPError(RuntimeError):
    """Retriable failure (connection problem, 429 or 5xx)."""


class HttpBackend(DescriberBackend):
    """Client for a hosted video/text model behind a JSON-over-HTTP endpoint.

    Requests are ``POST <endpoint>`` with a JSON body::

        {"task": "describe", "model": ..., "prompt": ..., "sample_id": ...,
         "segment_index": ..., "frame_shape": [C, H, W],
         "frames": [<base64 float32 little-endian>, ...]}

        {"task": "merge", "model": ..., "prompt": ..., "sample_id": ...,
         "texts": [...]}

    and the response must be a JSON object with a ``text`` field.
    """

    name = "http"

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        model_id: str = "remote",
        timeout: float = 60.0,
        retry: RetryPolicy = RetryPolicy(),
        rate_limit: float | None = None,
        max_frames: int = 16,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.retry = retry
        self.rate_limit = rate_limit
        self.max_frames = max_frames
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def close(self) -> None:
        self._client.close()

    def _post(self, payload: dict) -> str:
        try:
            resp = self._client.post(self.endpoint, json=payload)
        except httpx.TransportError as exc:
            raise TransientHTTPError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientHTTPError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return str(resp.json()["text"])
        except (ValueError, KeyError) as exc:
            raise BackendError(f"malformed response: {resp.text[:200]}") from exc

    def subsample(self, frames) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float32)
        if len(frames) <= self.max_frames:
            return frames
        idx = np.linspace(0, len(frames) - 1, self.max_frames).round().astype(int)
        return frames[idx]

    def describe(self, segment: Segment, sample_id: str, prompt: str) -> str:
        frames = self.subsample(segment.frames)
        return self._post(
            {
                "task": "describe",
                "model": self.model_id,
                "prompt": prompt,
                "sample_id": sample_id,
                "segment_index": segment.index,
                "frame_shape": list(frames.shape[1:]),
                "frames": [base64.b64encode(f.astype("<f4").tobytes()).decode("ascii") for f in frames],
            }
        )

    def merge(self, texts: list[str], prompt: str, sample_id: str = "") -> str:
        return self._post(
            {"task": "merge", "model": self.model_id, "prompt": prompt, "sample_id": sample_id, "texts": list(texts)}
        )
