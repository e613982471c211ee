"""
Trace format and invocation reconstruction tests
"""

import io

import pytest

from conftest import events_of, random_forest
from src.errors import NonMonotoneTimestampError, TraceFormatError, UnbalancedTraceError
from src.tracefmt import (TRACE_HEADER, EventKind, FunctionRegistry, SpillMarker, TraceEvent,
                          build_invocations, decode_events, decode_registry, encode_events,
                          encode_registry, ordered_roots, parse_trace, read_registry, read_trace,
                          write_registry, write_trace)

E, X = EventKind.ENTER, EventKind.EXIT


def ev(func, kind, ts, thread=0, site=0):
    return TraceEvent(thread, func, site, kind, ts)


@pytest.fixture
def registry():
    reg = FunctionRegistry()
    reg.register(1, "dispatch", is_root=True)
    reg.register(2, "lock_wait")
    reg.register(3, "service")
    return reg


class TestEncoding:
    def test_empty_stream_encodes_to_nothing(self):
        assert encode_events([]) == b""

    def test_event_line_layout(self):
        data = encode_events([ev(7, E, 100, thread=3, site=2)])
        assert data == b"t=3 f=7 s=2 e=E ts=100\n"

    def test_decode_accepts_bytes_text_and_streams(self):
        events = [ev(1, E, 10), ev(1, X, 25)]
        data = encode_events(events)
        assert decode_events(data) == events
        assert decode_events(data.decode()) == events
        assert decode_events(io.StringIO(TRACE_HEADER + "\n" + data.decode())) == events

    def test_u64_extremes_survive(self):
        big = 2 ** 64 - 1
        events = [ev(2 ** 32 - 1, E, big - 1, thread=big), ev(2 ** 32 - 1, X, big, thread=big)]
        assert decode_events(encode_events(events)) == events

    def test_unknown_kind_reports_line(self):
        text = "t=0 f=1 s=0 e=E ts=1\nt=0 f=1 s=0 e=Q ts=2\n"
        with pytest.raises(TraceFormatError) as info:
            decode_events(text)
        assert info.value.line_no == 2

    def test_malformed_line(self):
        with pytest.raises(TraceFormatError, match="line 1"):
            decode_events("garbage\n")

    def test_wrong_header_version(self):
        with pytest.raises(TraceFormatError, match="unsupported trace header"):
            decode_events("varlat-trace v9\n")

    def test_func_id_range(self):
        with pytest.raises(TraceFormatError, match="exceeds"):
            decode_events(f"t=0 f={2 ** 32} s=0 e=E ts=1\n")

    @pytest.mark.parametrize("line", [
        "t=0 f=01 s=0 e=E ts=1",
        "t=00 f=1 s=0 e=E ts=1",
        "t=0 f=1 s=007 e=E ts=1",
        "t=0 f=1 s=0 e=E ts=0010",
    ])
    def test_leading_zeros_rejected(self, line):
        with pytest.raises(TraceFormatError, match="leading zero"):
            decode_events(line + "\n")

    def test_zero_itself_is_canonical(self):
        assert decode_events("t=0 f=0 s=0 e=E ts=0\n") == [ev(0, E, 0, thread=0)]

    def test_backwards_timestamp(self):
        text = "t=0 f=1 s=0 e=E ts=10\nt=0 f=1 s=0 e=X ts=5\n"
        with pytest.raises(NonMonotoneTimestampError):
            decode_events(text)
        assert len(decode_events(text, allow_non_monotone=True)) == 2

    def test_timestamps_are_per_thread(self):
        text = "t=0 f=1 s=0 e=E ts=10\nt=1 f=1 s=0 e=E ts=5\n"
        assert len(decode_events(text)) == 2

    def test_spill_markers_are_parsed(self):
        text = f"{TRACE_HEADER}\n# spill t=4 ts=99\n# any comment\nt=4 f=1 s=0 e=E ts=100\n"
        events, spills = parse_trace(text)
        assert spills == [SpillMarker(4, 99)]
        assert len(events) == 1

    def test_file_round_trip(self, tmp_path, rng):
        forest, registry, _ = random_forest(rng, n_samples=5, n_threads=3)
        events = events_of(forest)
        path = tmp_path / "run.vtrace"
        assert write_trace(path, events, [SpillMarker(1, 3)]) == len(events)
        read_events, spills = read_trace(path)
        assert read_events == events
        assert spills == [SpillMarker(1, 3)]


class TestRegistry:
    def test_round_trip(self, registry, tmp_path):
        path = tmp_path / "run.vreg"
        write_registry(path, registry)
        loaded = read_registry(path)
        assert loaded.entries == registry.entries
        assert loaded.roots() == [1]

    def test_duplicate_names_rejected(self, registry):
        with pytest.raises(ValueError):
            registry.register(9, "service")

    def test_bad_registry_line(self):
        with pytest.raises(TraceFormatError, match="line 2"):
            decode_registry("varlat-registry v1\nnot-a-number name\n")

    def test_resolve(self, registry):
        assert registry.resolve("lock_wait") == 2
        assert registry.resolve("3") == 3
        assert registry.resolve(1) == 1
        with pytest.raises(KeyError):
            registry.resolve("nope")

    def test_encoding_is_sorted(self, registry):
        lines = encode_registry(registry).decode().splitlines()
        assert lines[1:] == ["1 dispatch root", "2 lock_wait", "3 service"]


class TestBuildInvocations:
    def test_nested_reconstruction(self, registry):
        events = [ev(1, E, 0), ev(2, E, 1, site=1), ev(2, X, 4, site=1), ev(3, E, 4, site=2),
                  ev(3, X, 9, site=2), ev(1, X, 10)]
        forest = build_invocations(events, registry)
        (root,) = forest[0]
        assert root.duration_ns == 10
        assert [c.func_id for c in root.children] == [2, 3]
        assert root.body_ns == 10 - 3 - 5

    def test_zero_length_invocation(self, registry):
        forest = build_invocations([ev(1, E, 5), ev(1, X, 5)], registry)
        assert forest[0][0].duration_ns == 0

    def test_unmatched_exit(self, registry):
        with pytest.raises(UnbalancedTraceError):
            build_invocations([ev(1, E, 0), ev(2, X, 1)], registry)

    def test_unclosed_frames_listed(self, registry):
        with pytest.raises(UnbalancedTraceError) as info:
            build_invocations([ev(1, E, 0), ev(2, E, 1)], registry)
        assert info.value.open_frames == [(0, 1, 0), (0, 2, 0)]

    def test_site_tag_must_match(self, registry):
        with pytest.raises(UnbalancedTraceError):
            build_invocations([ev(1, E, 0), ev(2, E, 1, site=1), ev(2, X, 2, site=2), ev(1, X, 3)], registry)

    def test_non_root_top_level_frames_dropped(self, registry):
        forest = build_invocations([ev(2, E, 0), ev(2, X, 3), ev(1, E, 4), ev(1, X, 6)], registry)
        assert [r.func_id for r in forest[0]] == [1]

    def test_interleaved_threads(self, rng):
        forest, registry, _ = random_forest(rng, n_samples=12, n_threads=4)
        rebuilt = build_invocations(events_of(forest), registry)
        assert sorted(rebuilt) == sorted(forest)
        for thread_id, roots in forest.items():
            assert [(r.start_ns, r.end_ns) for r in rebuilt[thread_id]] == [(r.start_ns, r.end_ns) for r in roots]
            for original, copy in zip(roots, rebuilt[thread_id]):
                assert [i.func_id for i in original.walk()] == [i.func_id for i in copy.walk()]

    def test_spill_boundary_roots_discarded(self, registry):
        events = [ev(1, E, 0), ev(1, X, 10), ev(1, E, 20), ev(1, X, 30)]
        forest = build_invocations(events, registry, [SpillMarker(0, 25)])
        assert [(r.start_ns, r.end_ns) for r in forest[0]] == [(0, 10)]
        kept = build_invocations(events, registry, [SpillMarker(0, 25)], discard_spill_boundaries=False)
        assert len(kept[0]) == 2

    def test_spill_on_other_thread_ignored(self, registry):
        events = [ev(1, E, 0), ev(1, X, 10)]
        forest = build_invocations(events, registry, [SpillMarker(5, 5)])
        assert len(forest[0]) == 1

    def test_ordered_roots_across_threads(self, registry):
        events = [ev(1, E, 5, thread=2), ev(1, E, 1, thread=1), ev(1, X, 9, thread=1), ev(1, X, 7, thread=2)]
        roots = ordered_roots(build_invocations(events, registry))
        assert [(r.thread_id, r.start_ns) for r in roots] == [(1, 1), (2, 5)]
