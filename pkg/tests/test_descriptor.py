import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handslt.descriptor import (
    Describer,
    DescriptionCache,
    HttpBackend,
    MockBackend,
    RateLimiter,
    RetryPolicy,
    call_with_retry,
    describe_dataset,
    describe_segments,
    merge_descriptions,
    segment_video,
)
from handslt.descriptor.backends import DescriberBackend
from handslt.errors import BackendError, EmptyVideoError, ValidationError


# -- segmentation ---------------------------------------------------------------


@pytest.mark.parametrize("n,lengths", [(16, [16]), (35, [16, 16, 3]), (15, [15]), (32, [16, 16]), (1, [1])])
def test_segment_examples(n, lengths):
    assert [s.length for s in segment_video(list(range(n)))] == lengths


def test_segment_exhaustive():
    for n in range(1, 65):
        frames = list(range(n))
        segs = segment_video(frames)
        assert sum(s.length for s in segs) == n
        assert all(s.length == 16 for s in segs[:-1])
        assert 1 <= segs[-1].length <= 16
        assert [s.index for s in segs] == list(range(len(segs)))
        assert [f for s in segs for f in s.frames] == frames
        assert len(segs) == -(-n // 16)


def test_segment_numpy_slices():
    frames = np.arange(40 * 2).reshape(40, 2)
    segs = segment_video(frames)
    assert np.array_equal(np.concatenate([s.frames for s in segs]), frames)
    assert [s.start for s in segs] == [0, 16, 32]


def test_segment_empty():
    with pytest.raises(EmptyVideoError):
        segment_video([])


# -- mock backend ---------------------------------------------------------------


def test_mock_deterministic_and_indexed():
    segs = segment_video(list(range(40)))
    a = describe_segments(segs, MockBackend(), "s1")
    b = describe_segments(segs, MockBackend(), "s1")
    assert a == b and len(a) == 3
    for i, text in enumerate(a):
        assert f"segment {i}" in text


@given(st.text(min_size=1, max_size=12), st.integers(0, 50))
@settings(max_examples=50, deadline=None)
def test_mock_is_function_of_sample_and_index(sample_id, index):
    seg = segment_video(list(range(16 * (index + 1))))[index]
    m = MockBackend()
    assert m.describe(seg, sample_id, "p") == m.describe(seg, sample_id, "other prompt")


def test_merge_ordinals():
    m = MockBackend()
    assert merge_descriptions(["A"], m) == "First, A."
    merged = merge_descriptions(["A", "B", "C"], m)
    assert merged.index("First, A") < merged.index("Then, B") < merged.index("Finally, C")
    assert merged == merge_descriptions(["A", "B", "C"], m)


def test_merge_empty():
    with pytest.raises(ValidationError):
        merge_descriptions([], MockBackend())


def test_document_shape():
    doc = Describer(MockBackend()).describe_video(np.zeros((35, 1)), "x")
    assert len(doc.segment_texts) == 3 and doc.merged_text
    assert set(doc.provenance) == {"backend", "model", "prompt_hash"}


# -- retries, caching, rate limiting --------------------------------------------


class FlakyBackend(DescriberBackend):
    name = "flaky"
    model_id = "flaky-1"

    def __init__(self, failures: int, attempts: int = 3):
        self.remaining = failures
        self.calls = 0
        self.retry = RetryPolicy(max_attempts=attempts, backoff=0.0)
        self.rate_limit = None

    def describe(self, segment, sample_id, prompt):
        self.calls += 1
        if self.remaining > 0:
            self.remaining -= 1
            raise ConnectionError("transient")
        return f"ok {segment.index}"

    def merge(self, texts, prompt, sample_id=""):
        return " ".join(texts)


def test_retry_succeeds_on_third_attempt():
    backend = FlakyBackend(failures=2)
    d = Describer(backend, sleep=lambda s: None)
    assert d.describe_segments(segment_video([0] * 5), "s") == ["ok 0"]
    assert d.stats.attempts == 3 and d.stats.failures == 2 and backend.calls == 3


def test_retry_exhausted_carries_segment_index():
    backend = FlakyBackend(failures=0)
    backend_calls = []

    def describe(segment, sample_id, prompt):
        backend_calls.append(segment.index)
        if segment.index == 1:
            raise TimeoutError("down")
        return "fine"

    backend.describe = describe
    with pytest.raises(BackendError) as info:
        Describer(backend, sleep=lambda s: None).describe_segments(segment_video([0] * 20), "s")
    assert info.value.segment_index == 1 and info.value.attempts == 3
    assert backend_calls == [0, 1, 1, 1]


def test_backoff_schedule():
    sleeps = []
    p = RetryPolicy(max_attempts=4, backoff=0.5, backoff_max=1.5)
    with pytest.raises(BackendError):
        call_with_retry(lambda: 1 / 0, p, sleep=sleeps.append)
    assert sleeps == [0.5, 1.0, 1.5]


def test_permanent_error_not_retried():
    calls = []

    def fn():
        calls.append(1)
        raise BackendError("bad request")

    with pytest.raises(BackendError):
        call_with_retry(fn, RetryPolicy(), sleep=lambda s: None)
    assert len(calls) == 1


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, s):
        self.sleeps.append(s)
        self.now += s


def test_rate_limiter_spaces_calls():
    clock = FakeClock()
    lim = RateLimiter(4.0, clock=clock, sleep=clock.sleep)
    stamps = []
    for _ in range(5):
        lim.acquire()
        stamps.append(clock.now)
    assert stamps == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    lim_off = RateLimiter(None, clock=clock, sleep=clock.sleep)
    lim_off.acquire()
    assert len(clock.sleeps) == 4


class CountingMock(MockBackend):
    def __init__(self):
        super().__init__()
        self.calls = 0
        self.lock = threading.Lock()

    def describe(self, segment, sample_id, prompt):
        with self.lock:
            self.calls += 1
        return super().describe(segment, sample_id, prompt)

    def merge(self, texts, prompt, sample_id=""):
        with self.lock:
            self.calls += 1
        return super().merge(texts, prompt, sample_id)


def test_cache_idempotent(tmp_path):
    cache = DescriptionCache(tmp_path / "cache")
    frames = np.zeros((40, 1))
    first = CountingMock()
    doc1 = Describer(first, cache).describe_video(frames, "v")
    assert first.calls == 4
    second = CountingMock()
    d2 = Describer(second, cache)
    doc2 = d2.describe_video(frames, "v")
    assert second.calls == 0 and d2.stats.cache_hits == 4
    assert doc1 == doc2


def test_prompt_change_invalidates_cache(tmp_path):
    cache = DescriptionCache(tmp_path)
    Describer(CountingMock(), cache).describe_video(np.zeros((5, 1)), "v")
    again = CountingMock()
    Describer(again, cache, describe_prompt="a different prompt").describe_video(np.zeros((5, 1)), "v")
    assert again.calls == 2


def test_corrupt_cache_entry_is_recomputed(tmp_path):
    cache = DescriptionCache(tmp_path)
    Describer(CountingMock(), cache).describe_video(np.zeros((5, 1)), "v")
    for p in tmp_path.rglob("*.json"):
        p.write_text("{")
    again = CountingMock()
    Describer(again, cache).describe_video(np.zeros((5, 1)), "v")
    assert again.calls == 2


def test_concurrency_preserves_order():
    segs = segment_video(list(range(16 * 9)))
    serial = describe_segments(segs, MockBackend(), "c")
    parallel = describe_segments(segs, MockBackend(), "c", max_concurrency=4)
    assert serial == parallel


def test_describe_dataset_rerun_is_byte_identical(tmp_path, tiny_root):
    cache = DescriptionCache(tmp_path / "cache")
    out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    describe_dataset(tiny_root, Describer(MockBackend(), cache), splits=("val",), out_path=out1)
    backend = CountingMock()
    describe_dataset(tiny_root, Describer(backend, cache, max_concurrency=3), splits=("val",), out_path=out2)
    assert backend.calls == 0
    assert out1.read_bytes() == out2.read_bytes()
    rec = json.loads(out1.read_text().splitlines()[0])
    assert set(rec) == {"sample_id", "segment_texts", "merged_text", "provenance"}


# -- HTTP backend against a local stub ------------------------------------------


class StubHandler(BaseHTTPRequestHandler):
    script: list = []
    requests: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        StubHandler.requests.append((dict(self.headers), body))
        status = StubHandler.script.pop(0) if StubHandler.script else 200
        if status == 200:
            if body["task"] == "describe":
                text = f"seg {body['segment_index']} with {len(body['frames'])} frames"
            else:
                text = " / ".join(body["texts"])
            payload = json.dumps({"text": text}).encode()
        else:
            payload = b'{"error": "nope"}'
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    StubHandler.script = []
    StubHandler.requests = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/describe"
    server.shutdown()
    server.server_close()


def test_http_backend_round_trip(stub_server):
    backend = HttpBackend(stub_server, api_key="k3y", model_id="stub", retry=RetryPolicy(backoff=0.0))
    frames = np.random.default_rng(0).random((20, 3, 4, 4), dtype=np.float32)
    doc = Describer(backend).describe_video(frames, "h1")
    backend.close()
    assert doc.segment_texts == ["seg 0 with 16 frames", "seg 1 with 4 frames"]
    assert doc.merged_text == "seg 0 with 16 frames / seg 1 with 4 frames"
    headers, body = StubHandler.requests[0]
    assert headers["Authorization"] == "Bearer k3y"
    assert body["frame_shape"] == [3, 4, 4] and body["model"] == "stub"
    import base64

    decoded = np.frombuffer(base64.b64decode(body["frames"][1]), dtype="<f4").reshape(3, 4, 4)
    assert np.array_equal(decoded, frames[1])


def test_http_backend_retries_transient(stub_server):
    StubHandler.script = [503, 503]
    backend = HttpBackend(stub_server, retry=RetryPolicy(max_attempts=3, backoff=0.0))
    d = Describer(backend, sleep=lambda s: None)
    assert d.describe_segments(segment_video(np.zeros((3, 1, 1, 1))), "r") == ["seg 0 with 3 frames"]
    assert d.stats.attempts == 3
    backend.close()


def test_http_backend_client_error_is_final(stub_server):
    StubHandler.script = [400]
    backend = HttpBackend(stub_server, retry=RetryPolicy(max_attempts=3, backoff=0.0))
    with pytest.raises(BackendError, match="400"):
        Describer(backend, sleep=lambda s: None).describe_segments(segment_video(np.zeros((3, 1, 1, 1))), "r")
    assert len(StubHandler.requests) == 1
    backend.close()


def test_http_subsample():
    backend = HttpBackend("http://unused", max_frames=4)
    out = backend.subsample(np.arange(10, dtype=np.float32)[:, None])
    assert out[:, 0].tolist() == [0, 3, 6, 9]
    backend.close()
