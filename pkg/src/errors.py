"""
Exception hierarchy for the varlat toolkit

What: One base class plus the error families raised by the trace, analysis,
      locking and simulation modules
How: Each family carries its exit code in `exit_code`; `exit_code_for` maps any
     exception to the CLI exit code (EXIT_OK, EXIT_USAGE, EXIT_RUNTIME)
"""

from typing import Any, Dict, List, Optional, Tuple


class VarlatError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class ConfigError(VarlatError):
    """Invalid or unreadable workload configuration."""

    exit_code = 2


class TraceFormatError(VarlatError):
    """
    Malformed trace or registry input

    Args:
        message: Human readable description
        line_no: 1-based line number in the input, when known
    """

    exit_code = 2

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class NonMonotoneTimestampError(TraceFormatError):
    """A thread's timestamps went backwards."""


class UnbalancedTraceError(TraceFormatError):
    """Enter/exit events do not nest; carries the frames still open."""

    def __init__(self, message: str, line_no: Optional[int] = None,
                 open_frames: Optional[List[Tuple[int, int, int]]] = None):
        self.open_frames = open_frames or []
        if self.open_frames:
            listed = ", ".join(f"t={t} f={f} s={s}" for t, f, s in self.open_frames)
            message = f"{message} (open frames: {listed})"
        super().__init__(message, line_no)


class CollectorStateError(VarlatError):
    """Collector used outside its quiesced/initialized contract."""


class ProbeOrderError(CollectorStateError):
    """A probe was closed out of LIFO order or on the wrong thread."""


class InsufficientSamplesError(VarlatError):
    """Fewer than two samples for a variance computation."""

    exit_code = 2


class UnknownNodeError(VarlatError):
    """A call path or function was never observed / registered."""

    exit_code = 2


class RefinementError(VarlatError):
    """Iterative refinement could not continue."""


class StaleFactorError(RefinementError):
    """A selected factor names a function the registry does not know."""


class LockProtocolError(VarlatError):
    """Lock manager contract violation."""


class DuplicateRequestError(LockProtocolError):
    """Same transaction requested the same record twice."""


class LockNotHeldError(LockProtocolError):
    """Release of a lock the transaction does not hold."""


class WorkloadError(VarlatError):
    """Simulation or live run failure."""


class SaturationError(WorkloadError):
    """
    The simulated system stopped keeping up with the arrival rate

    Args:
        message: Summary line
        diagnostic: Queue/backlog details for the report
    """

    def __init__(self, message: str, diagnostic: Optional[Dict[str, Any]] = None):
        self.diagnostic = diagnostic or {}
        super().__init__(message)


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(error, VarlatError):
        return error.exit_code
    # sink/IO failures and anything unexpected abort the run
    return EXIT_RUNTIME
