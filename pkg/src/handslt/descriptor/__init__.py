"""Hand-motion descriptions of sign videos from a describer backend."""

from handslt.descriptor.backends import (
    DescriberBackend,
    HttpBackend,
    MockBackend,
    RateLimiter,
    RetryPolicy,
)
from handslt.descriptor.pipeline import (
    CallStats,
    DescriptionCache,
    DescriptionDocument,
    Describer,
    call_with_retry,
    describe_dataset,
    describe_segments,
    merge_descriptions,
)
from handslt.descriptor.segment import SEGMENT_LENGTH, Segment, segment_video

__all__ = [
    "CallStats", "DescriberBackend", "Describer", "DescriptionCache", "DescriptionDocument",
    "HttpBackend", "MockBackend", "RateLimiter", "RetryPolicy", "SEGMENT_LENGTH", "Segment",
    "call_with_retry", "describe_dataset", "describe_segments", "merge_descriptions", "segment_video",
]
