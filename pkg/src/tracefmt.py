"""
Trace Event Model and File Format

What: Enter/exit trace events, their line-oriented text encoding, the function
      registry, and reconstruction of well-nested invocation trees
How: One event per line (`t=<u64> f=<u32> s=<u32> e=<E|X> ts=<u64>`), versioned
     by a header line; per-thread frame stacks rebuild Invocation forests

File formats:
- Trace:    first line `varlat-trace v1`, then event lines; spill markers are
            comment lines `# spill t=<u64> ts=<u64>`
- Registry: first line `varlat-registry v1`, then `<u32> <name> [root]`

All timestamps are integer nanoseconds; nothing in the trace path uses floats.
"""

import io
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, TextIO, Tuple, Union

from src.errors import NonMonotoneTimestampError, TraceFormatError, UnbalancedTraceError

logger = logging.getLogger(__name__)

TRACE_HEADER = "varlat-trace v1"
REGISTRY_HEADER = "varlat-registry v1"

U32_MAX = 2 ** 32 - 1
U64_MAX = 2 ** 64 - 1

_EVENT_RE = re.compile(r"^t=(\d+) f=(\d+) s=(\d+) e=(\S+) ts=(\d+)$")
_SPILL_RE = re.compile(r"^# spill t=(\d+) ts=(\d+)$")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.:<>-]*$")

Source = Union[bytes, str, TextIO, Iterable[str]]


class EventKind(str, Enum):
    ENTER = "E"
    EXIT = "X"


@dataclass(frozen=True)
class TraceEvent:
    """One enter or exit record on a thread's monotonic clock."""

    thread_id: int
    func_id: int
    site_tag: int
    kind: EventKind
    ts_ns: int


@dataclass(frozen=True)
class SpillMarker:
    """A per-thread buffer spill; invocations spanning ts_ns are suspect."""

    thread_id: int
    ts_ns: int


@dataclass(frozen=True)
class FunctionInfo:
    name: str
    is_root: bool = False


class FunctionRegistry:
    """
    Function id <-> name table

    What: The set of instrumentable functions and which of them are roots
    How: A dict keyed by func_id plus a reverse name index; serialized with
         encode_registry/decode_registry
    """

    def __init__(self, entries: Optional[Dict[int, FunctionInfo]] = None):
        self.entries: Dict[int, FunctionInfo] = {}
        self._by_name: Dict[str, int] = {}
        for func_id, info in (entries or {}).items():
            self.register(func_id, info.name, info.is_root)

    def register(self, func_id: int, name: str, is_root: bool = False) -> int:
        if not 0 <= func_id <= U32_MAX:
            raise ValueError(f"func_id out of u32 range: {func_id}")
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid function name: {name!r}")
        if func_id in self.entries:
            raise ValueError(f"duplicate func_id {func_id}")
        if name in self._by_name:
            raise ValueError(f"duplicate function name {name!r}")
        self.entries[func_id] = FunctionInfo(name, is_root)
        self._by_name[name] = func_id
        return func_id

    def __contains__(self, func_id: object) -> bool:
        return func_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def name_of(self, func_id: int) -> str:
        info = self.entries.get(func_id)
        return info.name if info else f"func#{func_id}"

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown function {name!r}") from None

    def resolve(self, name_or_id: Union[str, int]) -> int:
        """Accept a name, a numeric string or an id and return the id."""
        if isinstance(name_or_id, int):
            return name_or_id
        if name_or_id in self._by_name:
            return self._by_name[name_or_id]
        if name_or_id.isdigit():
            return int(name_or_id)
        return self.id_of(name_or_id)

    def is_root(self, func_id: int) -> bool:
        info = self.entries.get(func_id)
        return bool(info and info.is_root)

    def roots(self) -> List[int]:
        return sorted(fid for fid, info in self.entries.items() if info.is_root)


@dataclass
class Invocation:
    """
    One reconstructed call interval and its nested children

    body_ns is the time not covered by any child; duration == body + children.
    """

    func_id: int
    site_tag: int
    start_ns: int
    end_ns: int
    thread_id: int = 0
    children: List["Invocation"] = field(default_factory=list)

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns

    @property
    def body_ns(self) -> int:
        return self.duration_ns - sum(child.duration_ns for child in self.children)

    def walk(self) -> Iterator["Invocation"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


Forest = Dict[int, List[Invocation]]


# ---------------------------------------------------------------------------
# Event encoding
# ---------------------------------------------------------------------------

def format_event(event: TraceEvent) -> str:
    return (f"t={event.thread_id} f={event.func_id} s={event.site_tag} "
            f"e={event.kind.value} ts={event.ts_ns}")


def format_spill(marker: SpillMarker) -> str:
    return f"# spill t={marker.thread_id} ts={marker.ts_ns}"


def encode_events(events: Iterable[TraceEvent]) -> bytes:
    """
    Encode events as newline-terminated UTF-8 lines (no header)

    Examples:
        encode_events([]) -> b""
    """
    return "".join(format_event(e) + "\n" for e in events).encode("utf-8")


def _iter_lines(stream: Source) -> Iterator[str]:
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    for raw in stream:
        yield raw.rstrip("\n").rstrip("\r")


def _parse_int(text: str, limit: int, what: str, line_no: int) -> int:
    if len(text) > 1 and text[0] == "0":
        raise TraceFormatError(f"{what} {text} has a leading zero", line_no)
    value = int(text)
    if value > limit:
        raise TraceFormatError(f"{what} {value} exceeds its range", line_no)
    return value


def parse_trace(stream: Source, allow_non_monotone: bool = False
                ) -> Tuple[List[TraceEvent], List[SpillMarker]]:
    """
    Decode a trace into events and spill markers

    Args:
        stream: bytes, str, or an iterable of lines
        allow_non_monotone: Log backwards timestamps instead of raising

    Returns:
        tuple: (events in file order, spill markers in file order)
    """
    events: List[TraceEvent] = []
    spills: List[SpillMarker] = []
    last_ts: Dict[int, int] = {}

    for line_no, line in enumerate(_iter_lines(stream), start=1):
        if line_no == 1 and line.startswith("varlat-trace"):
            if line != TRACE_HEADER:
                raise TraceFormatError(f"unsupported trace header {line!r}", line_no)
            continue
        if not line:
            continue
        if line.startswith("#"):
            spill = _SPILL_RE.match(line)
            if spill:
                spills.append(SpillMarker(
                    _parse_int(spill.group(1), U64_MAX, "thread id", line_no),
                    _parse_int(spill.group(2), U64_MAX, "timestamp", line_no),
                ))
            continue

        match = _EVENT_RE.match(line)
        if not match:
            raise TraceFormatError(f"malformed trace line {line!r}", line_no)
        thread_s, func_s, site_s, kind_s, ts_s = match.groups()
        try:
            kind = EventKind(kind_s)
        except ValueError:
            raise TraceFormatError(f"unknown event kind {kind_s!r}", line_no) from None

        event = TraceEvent(
            thread_id=_parse_int(thread_s, U64_MAX, "thread id", line_no),
            func_id=_parse_int(func_s, U32_MAX, "func id", line_no),
            site_tag=_parse_int(site_s, U32_MAX, "site tag", line_no),
            kind=kind,
            ts_ns=_parse_int(ts_s, U64_MAX, "timestamp", line_no),
        )

        previous = last_ts.get(event.thread_id)
        if previous is not None and event.ts_ns < previous:
            message = (f"timestamp {event.ts_ns} < {previous} on thread {event.thread_id}")
            if not allow_non_monotone:
                raise NonMonotoneTimestampError(message, line_no)
            logger.warning(f"line {line_no}: {message} (kept)")
        last_ts[event.thread_id] = max(event.ts_ns, previous or 0)
        events.append(event)

    return events, spills


def decode_events(stream: Source, allow_non_monotone: bool = False) -> List[TraceEvent]:
    """
    Decode a trace stream into events in file order

    Raises:
        TraceFormatError: malformed line or unknown kind token (with line number)
        NonMonotoneTimestampError: backwards timestamp within a thread, unless
            allow_non_monotone is set
    """
    events, _ = parse_trace(stream, allow_non_monotone)
    return events


def write_trace(target: Union[str, Path, TextIO], events: Iterable[TraceEvent],
                spills: Iterable[SpillMarker] = ()) -> int:
    """Write a complete trace file (header, spill markers, events)."""
    lines = [TRACE_HEADER]
    lines.extend(format_spill(marker) for marker in spills)
    count = 0
    for event in events:
        lines.append(format_event(event))
        count += 1
    text = "\n".join(lines) + "\n"
    if isinstance(target, (str, Path)):
        Path(target).write_text(text, encoding="utf-8")
    else:
        target.write(text)
    return count


def read_trace(path: Union[str, Path], allow_non_monotone: bool = False
               ) -> Tuple[List[TraceEvent], List[SpillMarker]]:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_trace(handle, allow_non_monotone)


# ---------------------------------------------------------------------------
# Registry encoding
# ---------------------------------------------------------------------------

def encode_registry(registry: FunctionRegistry) -> bytes:
    lines = [REGISTRY_HEADER]
    for func_id in sorted(registry.entries):
        info = registry.entries[func_id]
        lines.append(f"{func_id} {info.name}" + (" root" if info.is_root else ""))
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_registry(stream: Source) -> FunctionRegistry:
    registry = FunctionRegistry()
    for line_no, line in enumerate(_iter_lines(stream), start=1):
        if line_no == 1:
            if line != REGISTRY_HEADER:
                raise TraceFormatError(f"expected header {REGISTRY_HEADER!r}, got {line!r}", line_no)
            continue
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) not in (2, 3) or not parts[0].isdigit() or (len(parts) == 3 and parts[2] != "root"):
            raise TraceFormatError(f"malformed registry line {line!r}", line_no)
        try:
            registry.register(int(parts[0]), parts[1], is_root=len(parts) == 3)
        except ValueError as e:
            raise TraceFormatError(str(e), line_no) from None
    return registry


def read_registry(path: Union[str, Path]) -> FunctionRegistry:
    with open(path, "r", encoding="utf-8") as handle:
        return decode_registry(handle)


def write_registry(path: Union[str, Path], registry: FunctionRegistry) -> None:
    Path(path).write_bytes(encode_registry(registry))


# ---------------------------------------------------------------------------
# Invocation reconstruction
# ---------------------------------------------------------------------------

def build_invocations(events: Iterable[TraceEvent], registry: FunctionRegistry,
                      spills: Iterable[SpillMarker] = (),
                      discard_spill_boundaries: bool = True) -> Forest:
    """
    Rebuild per-thread forests of root invocations from raw events

    Root invocations are top-level frames whose function is flagged is_root.
    A root function entered inside another frame is an ordinary child.
    Top-level frames of non-root functions are dropped (they are not samples).

    Args:
        events: Events of any number of interleaved threads
        registry: Function registry (decides root-ness)
        spills: Spill markers; roots of a thread whose interval contains one of
                that thread's spill timestamps are discarded
        discard_spill_boundaries: Disable to keep spill-boundary roots

    Returns:
        dict: thread_id -> list of root Invocations in start order

    Raises:
        UnbalancedTraceError: exit without matching enter, or frames left open
    """
    stacks: Dict[int, List[Invocation]] = {}
    forest: Forest = {}
    unknown = set()
    dropped_top_level = 0

    for event in events:
        stack = stacks.setdefault(event.thread_id, [])
        if event.func_id not in registry:
            unknown.add(event.func_id)

        if event.kind is EventKind.ENTER:
            stack.append(Invocation(event.func_id, event.site_tag, event.ts_ns, event.ts_ns,
                                    thread_id=event.thread_id))
            continue

        if not stack or stack[-1].func_id != event.func_id or stack[-1].site_tag != event.site_tag:
            open_frames = [(event.thread_id, f.func_id, f.site_tag) for f in stack]
            raise UnbalancedTraceError(
                f"exit of f={event.func_id} s={event.site_tag} on thread {event.thread_id} "
                f"without matching enter", open_frames=open_frames)

        frame = stack.pop()
        frame.end_ns = event.ts_ns
        if stack:
            stack[-1].children.append(frame)
        elif registry.is_root(frame.func_id):
            forest.setdefault(event.thread_id, []).append(frame)
        else:
            dropped_top_level += 1

    still_open = [(tid, f.func_id, f.site_tag) for tid, stack in sorted(stacks.items()) for f in stack]
    if still_open:
        raise UnbalancedTraceError("trace ended with unclosed frames", open_frames=still_open)

    if unknown:
        logger.warning(f"Events reference unregistered func ids: {sorted(unknown)}")
    if dropped_top_level:
        logger.debug(f"Dropped {dropped_top_level} top-level non-root frames")

    if discard_spill_boundaries:
        spill_times: Dict[int, List[int]] = {}
        for marker in spills:
            spill_times.setdefault(marker.thread_id, []).append(marker.ts_ns)
        for thread_id, times in spill_times.items():
            roots = forest.get(thread_id, [])
            kept = [r for r in roots if not any(r.start_ns <= ts <= r.end_ns for ts in times)]
            if len(kept) != len(roots):
                logger.info(f"Discarded {len(roots) - len(kept)} spill-boundary roots on thread {thread_id}")
                forest[thread_id] = kept

    return forest


def ordered_roots(forest: Forest, root_func: Optional[int] = None) -> List[Invocation]:
    """All root invocations across threads ordered by (start_ns, thread_id, end_ns)."""
    roots = [inv for invs in forest.values() for inv in invs
             if root_func is None or inv.func_id == root_func]
    roots.sort(key=lambda inv: (inv.start_ns, inv.thread_id, inv.end_ns))
    return roots
