"""
Runtime Instrumentation Collector

What: Scoped enter/exit probes for registered functions, a profile set that
      decides which functions record anything, and per-thread event buffers
      flushed to the trace format
How: Each worker thread appends (func, site, kind, ts) tuples to its own list
     (found through threading.local); probes for functions outside the profile
     set return one shared inert handle without reading the clock

Usage:
    collector = Collector(registry, ProfileSet({dispatch_id}))
    with collector.probe("dispatch"):
        ...
    with TraceSink.open(collector.trace_path(iteration=1)) as sink:
        collector.flush_traces(sink)
"""

import itertools
import logging
import os
import threading
import time
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, TextIO, Tuple, Union

from dotenv import find_dotenv, load_dotenv

from src.errors import CollectorStateError, ProbeOrderError
from src.tracefmt import (EventKind, FunctionRegistry, SpillMarker, TRACE_HEADER, TraceEvent,
                          format_event, format_spill)

logger = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 1 << 20
TRACE_DIR_ENV = "VARLAT_TRACE_DIR"

_ENTER = EventKind.ENTER
_EXIT = EventKind.EXIT


class ProfileSet:
    """
    The set of func_ids whose probes record events

    Mutations are only legal between runs; Collector.set_profile_set enforces
    that no probe is open when the set is swapped.
    """

    def __init__(self, enabled: Iterable[int] = ()):
        self.enabled = set(enabled)

    def __contains__(self, func_id: object) -> bool:
        return func_id in self.enabled

    def __len__(self) -> int:
        return len(self.enabled)

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.enabled))

    def add(self, func_id: int) -> None:
        self.enabled.add(func_id)

    def update(self, func_ids: Iterable[int]) -> None:
        self.enabled.update(func_ids)

    def copy(self) -> "ProfileSet":
        return ProfileSet(self.enabled)

    def names(self, registry: FunctionRegistry) -> List[str]:
        return [registry.name_of(fid) for fid in self]


class ScopeProbe:
    """
    An open probe: remembers what to emit at close and which buffer owns it

    Also the context manager returned by Collector.probe; exiting an inert
    probe does nothing.
    """

    __slots__ = ("func_id", "site_tag", "opened_at_ns", "buffer", "collector")

    def __init__(self, func_id: int, site_tag: int, opened_at_ns: int, buffer: Optional["ThreadBuffer"],
                 collector: Optional["Collector"] = None):
        self.func_id = func_id
        self.site_tag = site_tag
        self.opened_at_ns = opened_at_ns
        self.buffer = buffer
        self.collector = collector

    @property
    def inert(self) -> bool:
        return self.buffer is None

    def __enter__(self) -> "ScopeProbe":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self.buffer is not None:
            self.collector.close_probe(self)


INERT_PROBE = ScopeProbe(0, 0, 0, None)


class ThreadBuffer:
    """Events and open-probe stack of one thread; touched only by that thread."""

    __slots__ = ("thread_id", "events", "open_probes", "spills")

    def __init__(self, thread_id: int):
        self.thread_id = thread_id
        self.events: List[Tuple[int, int, EventKind, int]] = []
        self.open_probes: List[ScopeProbe] = []
        self.spills: List[int] = []


class TraceSink:
    """
    Destination for serialized events

    Writes the trace header on open; appends event lines and spill markers.
    Thread-safe so buffers can spill from worker threads.
    """

    def __init__(self, handle: TextIO, path: Optional[Path] = None, owns_handle: bool = False):
        self.handle = handle
        self.path = path
        self._owns_handle = owns_handle
        self._lock = threading.Lock()
        self.events_written = 0
        self.handle.write(TRACE_HEADER + "\n")

    @classmethod
    def open(cls, path: Union[str, Path]) -> "TraceSink":
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return cls(open(path, "w", encoding="utf-8"), path=path, owns_handle=True)

    def write_events(self, thread_id: int, events: List[Tuple[int, int, EventKind, int]],
                     spill_ts: Optional[int] = None) -> int:
        lines = []
        if spill_ts is not None:
            lines.append(format_spill(SpillMarker(thread_id, spill_ts)))
        lines.extend(format_event(TraceEvent(thread_id, f, s, k, ts)) for f, s, k, ts in events)
        if not lines:
            return 0
        with self._lock:
            self.handle.write("\n".join(lines) + "\n")
            self.events_written += len(events)
        return len(events)

    def close(self) -> None:
        self.handle.flush()
        if self._owns_handle:
            self.handle.close()

    def __enter__(self) -> "TraceSink":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def trace_dir() -> Path:
    """Trace output directory from VARLAT_TRACE_DIR (.env honoured), default ./traces."""
    load_dotenv(find_dotenv(usecwd=True))
    return Path(os.environ.get(TRACE_DIR_ENV, "traces"))


def trace_path(iteration: int, directory: Optional[Path] = None, now: Optional[datetime] = None) -> Path:
    """`run-<iteration>-<timestamp>.vtrace` under the trace directory."""
    stamp = (now or datetime.now()).strftime("%Y%m%dT%H%M%S%f")
    return (directory or trace_dir()) / f"run-{iteration}-{stamp}.vtrace"


class Collector:
    """
    Probe front-end and per-thread buffer owner

    Args:
        registry: Registered functions (unknown ids are recorded and flagged)
        profile_set: Functions whose probes record events
        buffer_capacity: Events per thread buffer before spilling to spill_sink
        spill_sink: Where full buffers go; without one, buffers keep growing
        clock: Monotonic nanosecond clock
    """

    def __init__(self, registry: FunctionRegistry, profile_set: Optional[ProfileSet] = None,
                 buffer_capacity: int = DEFAULT_BUFFER_CAPACITY,
                 spill_sink: Optional[TraceSink] = None,
                 clock: Callable[[], int] = time.monotonic_ns):
        if buffer_capacity < 1:
            raise ValueError("buffer_capacity must be positive")
        self.registry = registry
        self.profile_set = profile_set or ProfileSet()
        self.buffer_capacity = buffer_capacity
        self.spill_sink = spill_sink
        self.clock = clock
        self._enabled = frozenset(self.profile_set.enabled)
        self._unregistered = self._unregistered_ids(self._enabled)
        self._local = threading.local()
        self._buffers: Dict[int, ThreadBuffer] = {}
        self._buffers_lock = threading.Lock()
        self._thread_ids = itertools.count(1)
        self._unknown: set = set()

    # -- profile set -------------------------------------------------------

    def set_profile_set(self, profile_set: ProfileSet) -> None:
        """Swap the profile set between runs; refused while any probe is open."""
        with self._buffers_lock:
            busy = [b.thread_id for b in self._buffers.values() if b.open_probes]
        if busy:
            raise CollectorStateError(f"profile set changed while probes are open on threads {busy}")
        self.profile_set = profile_set
        self._enabled = frozenset(profile_set.enabled)
        self._unregistered = self._unregistered_ids(self._enabled)
        logger.info(f"Profile set now holds {len(profile_set)} functions")

    def _buffer(self) -> ThreadBuffer:
        buf = getattr(self._local, "buffer", None)
        if buf is None:
            with self._buffers_lock:
                buf = ThreadBuffer(next(self._thread_ids))
                self._buffers[buf.thread_id] = buf
            self._local.buffer = buf
        return buf

    def _unregistered_ids(self, enabled: frozenset) -> frozenset:
        # open_probe checks this set, never the registry
        return frozenset(fid for fid in enabled if fid not in self.registry)

    # -- hot path ----------------------------------------------------------

    def open_probe(self, func_id: int, site_tag: int = 0) -> ScopeProbe:
        """
        Record an enter event if func_id is profiled, else return the inert probe

        The inert path performs no clock read and no buffer write.
        """
        if func_id not in self._enabled:
            return INERT_PROBE
        if func_id in self._unregistered:
            self._unknown.add(func_id)
        buf = self._buffer()
        ts = self.clock()
        probe = ScopeProbe(func_id, site_tag, ts, buf, self)
        buf.events.append((func_id, site_tag, _ENTER, ts))
        buf.open_probes.append(probe)
        if len(buf.events) >= self.buffer_capacity:
            self._spill(buf)
        return probe

    def close_probe(self, probe: ScopeProbe) -> None:
        """
        Record the matching exit event

        Raises:
            ProbeOrderError: a younger probe is still open on this thread, or
                the probe belongs to another thread
        """
        buf = probe.buffer
        if buf is None:
            return
        if getattr(self._local, "buffer", None) is not buf:
            raise ProbeOrderError(f"probe for f={probe.func_id} closed on a different thread")
        if not buf.open_probes or buf.open_probes[-1] is not probe:
            raise ProbeOrderError(
                f"out-of-order close of f={probe.func_id}; innermost open is "
                f"f={buf.open_probes[-1].func_id if buf.open_probes else None}")
        buf.open_probes.pop()
        ts = self.clock()
        buf.events.append((probe.func_id, probe.site_tag, _EXIT, ts))
        if len(buf.events) >= self.buffer_capacity:
            self._spill(buf)

    def probe(self, func: Union[int, str], site_tag: int = 0) -> ScopeProbe:
        """Open a probe for use in a `with` block; accepts a registered name or an id."""
        func_id = func if isinstance(func, int) else self.registry.id_of(func)
        return self.open_probe(func_id, site_tag)

    def _spill(self, buf: ThreadBuffer) -> None:
        if self.spill_sink is None:
            return
        spill_ts = buf.events[-1][3]
        self.spill_sink.write_events(buf.thread_id, buf.events, spill_ts=spill_ts)
        buf.spills.append(spill_ts)
        buf.events = []

    # -- flush -------------------------------------------------------------

    def event_count(self) -> int:
        with self._buffers_lock:
            return sum(len(b.events) for b in self._buffers.values())

    def flush_traces(self, sink: TraceSink) -> int:
        """
        Serialize and empty every thread buffer

        Returns:
            int: Number of events written by this call

        Raises:
            CollectorStateError: a probe is still open
        """
        with self._buffers_lock:
            buffers = [self._buffers[tid] for tid in sorted(self._buffers)]
        still_open = [b.thread_id for b in buffers if b.open_probes]
        if still_open:
            raise CollectorStateError(f"flush with open probes on threads {still_open}")

        written = 0
        for buf in buffers:
            events, buf.events = buf.events, []
            written += sink.write_events(buf.thread_id, events)

        if self._unknown:
            logger.warning(f"Probes fired for unregistered func ids: {sorted(self._unknown)}")
        logger.info(f"Flushed {written} events from {len(buffers)} thread buffers")
        return written

    def trace_path(self, iteration: int, directory: Optional[Path] = None) -> Path:
        return trace_path(iteration, directory)
