"""Fixed-length segmentation of a frame sequence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from handslt.errors import EmptyVideoError

SEGMENT_LENGTH = 16


@dataclass
class Segment:
    index: int
    frames: Any  # slice of the source frame sequence
    start: int

    @property
    def length(self) -> int:
        return len(self.frames)


def segment_video(frames: Sequence, segment_length: int = SEGMENT_LENGTH) -> list[Segment]:
    """Split ``frames`` into consecutive non-overlapping segments.

    Frames are buffered one by one; a full buffer of ``segment_length`` becomes
    a segment, and a non-empty remainder becomes a final shorter segment.
    """
    n = len(frames)
    if n == 0:
        raise EmptyVideoError("cannot segment a video with no frames")
    segments, start = [], 0
    buffered = 0
    for i in range(n):
        buffered += 1
        if buffered == segment_length:
            segments.append(Segment(len(segments), frames[start : i + 1], start))
            start, buffered = i + 1, 0
    if buffered:
        segments.append(Segment(len(segments), frames[start:n], start))
    return segments
