"""
Live Instrumented Testbed

What: Runs the simulator's transaction logic on real worker threads with
      collector probes around its phases, producing trace + registry files
      for the variance profiler
How: Transactions come from workload.generate_transactions; the lock manager
     sits behind one threading.Condition (coarse exclusion region); the buffer
     pool is a LiveBufferPool with its own list lock; service and log work
     are sleeps scaled by live.time_scale

Instrumented call graph (site tags in brackets):
    dispatch (root)
      lock_wait [1]   buf_access [2]   service [3]   commit [4]
    buf_access -> make_young [1]
    commit     -> log_flush [1]
    service    -> filler_NNN [1]   (one per call, rotating through the fillers;
                                    only when extra probes are requested)

Every probe is opened unconditionally, so two runs with the same seed and
profile set record the same span counts; only durations differ.
"""

import logging
import queue
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import psutil

from src.bufpool import LiveBufferPool
from src.collector import Collector, ProfileSet, TraceSink, trace_dir as default_trace_dir, trace_path
from src.config import SimConfig, validate
from src.errors import WorkloadError
from src.lockmgr import LockManager, LockRequest, SchedulerPolicy
from src.tracefmt import Forest, FunctionRegistry, build_invocations, read_trace, write_registry
from src.workload import TxnSpec, generate_transactions

logger = logging.getLogger(__name__)

DISPATCH, LOCK_WAIT, BUF_ACCESS, MAKE_YOUNG, SERVICE, COMMIT, LOG_FLUSH = range(1, 8)
FILLER_BASE = 100

FUNCTIONS = {
    DISPATCH: "dispatch",
    LOCK_WAIT: "lock_wait",
    BUF_ACCESS: "buf_access",
    MAKE_YOUNG: "make_young",
    SERVICE: "service",
    COMMIT: "commit",
    LOG_FLUSH: "log_flush",
}

CALL_GRAPH: Dict[int, Tuple[int, ...]] = {
    DISPATCH: (LOCK_WAIT, BUF_ACCESS, SERVICE, COMMIT),
    BUF_ACCESS: (MAKE_YOUNG,),
    COMMIT: (LOG_FLUSH,),
}


def build_registry(extra_probes: int = 0) -> FunctionRegistry:
    """Testbed functions plus extra_probes filler functions called from service."""
    registry = FunctionRegistry()
    for func_id, name in FUNCTIONS.items():
        registry.register(func_id, name, is_root=func_id == DISPATCH)
    for i in range(extra_probes):
        registry.register(FILLER_BASE + i, f"filler_{i:03d}")
    return registry


def call_graph(registry: FunctionRegistry) -> Dict[int, Tuple[int, ...]]:
    graph = dict(CALL_GRAPH)
    fillers = tuple(fid for fid in sorted(registry.entries) if fid >= FILLER_BASE)
    if fillers:
        graph[SERVICE] = fillers
    return graph


class LiveEngine:
    """
    Worker threads executing generated transactions back to back

    Args:
        config: Workload; live.threads workers run live.n_txns transactions
        collector: Probe front-end (its registry decides filler probes)
    """

    def __init__(self, config: SimConfig, collector: Collector):
        self.config = config
        self.collector = collector
        self.fillers = [fid for fid in sorted(collector.registry.entries) if fid >= FILLER_BASE]
        self.specs = live_transactions(config)
        self.region = threading.Condition()
        self.manager = LockManager(SchedulerPolicy(config.scheduler, theta=config.vats.theta, seed=config.seed))
        self.pool = LiveBufferPool(config.bufpool.capacity, config.bufpool.old_fraction, config.bufpool.mode,
                                   config.bufpool.spin_timeout_ns,
                                   make_young_scope=lambda: collector.probe(MAKE_YOUNG, 1))
        self.devices = [threading.Lock() for _ in range(config.log.devices)]
        self.device_waiters = [0] * config.log.devices
        self.latencies_ns: List[int] = []
        self.errors: List[BaseException] = []
        self._latency_lock = threading.Lock()

    def _sleep(self, ns: int) -> None:
        time.sleep(ns * self.config.live.time_scale / 1e9)

    def _lock(self, spec: TxnSpec, index: int, birth_ns: int) -> None:
        record_id, mode = spec.accesses[index]
        with self.region:
            now = time.monotonic_ns()
            request = LockRequest(spec.txn_id, mode, now, min(birth_ns, now))
            self.manager.request_lock(record_id, request, now)
            while not request.granted:
                self.region.wait()

    def _flush(self, spec: TxnSpec) -> None:
        with self.region:
            idle = [i for i, d in enumerate(self.devices) if not d.locked()]
            index = idle[0] if idle else min(range(len(self.devices)), key=lambda i: (self.device_waiters[i], i))
            self.device_waiters[index] += 1
        with self.devices[index]:
            self._sleep(spec.log_flush_ns)
        with self.region:
            self.device_waiters[index] -= 1

    def run_transaction(self, spec: TxnSpec) -> None:
        probe = self.collector.probe
        pool_enabled = self.config.bufpool.enabled
        policy = self.config.log.policy
        begin = time.monotonic_ns()
        try:
            with probe(DISPATCH):
                for index, (record_id, _) in enumerate(spec.accesses):
                    with probe(LOCK_WAIT, 1):
                        self._lock(spec, index, begin)
                    with probe(BUF_ACCESS, 2):
                        if pool_enabled:
                            self.pool.access_page(record_id % self.config.bufpool.n_pages,
                                                  thread_id=threading.get_ident())
                        else:
                            with probe(MAKE_YOUNG, 1):
                                pass
                    with probe(SERVICE, 3):
                        self._sleep(spec.service_ns[index])
                        if self.fillers:
                            with probe(self.fillers[(spec.txn_id + index) % len(self.fillers)], 1):
                                pass
                with probe(COMMIT, 4):
                    with probe(LOG_FLUSH, 1):
                        if policy != "lazy_write":
                            self._sleep(spec.log_write_ns)
                        if policy == "eager":
                            self._flush(spec)
                    self._release(spec)
        except BaseException:
            # a failed transaction must not strand the workers queued behind it
            self._release(spec)
            raise
        with self._latency_lock:
            self.latencies_ns.append(time.monotonic_ns() - begin)

    def _release(self, spec: TxnSpec) -> None:
        with self.region:
            self.manager.release_all(spec.txn_id, time.monotonic_ns())
            self.region.notify_all()

    def _worker(self, work: "queue.Queue[Optional[TxnSpec]]") -> None:
        while True:
            spec = work.get()
            if spec is None:
                return
            try:
                self.run_transaction(spec)
            except BaseException as e:
                self.errors.append(e)
                return

    def run(self) -> float:
        """Execute every transaction; returns elapsed wall-clock seconds."""
        work: "queue.Queue[Optional[TxnSpec]]" = queue.Queue()
        for spec in self.specs:
            work.put(spec)
        threads = [threading.Thread(target=self._worker, args=(work,), name=f"varlat-worker-{i}", daemon=True)
                   for i in range(self.config.live.threads)]
        for _ in threads:
            work.put(None)
        started = time.perf_counter()
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        elapsed = time.perf_counter() - started
        if self.errors:
            raise WorkloadError(f"live worker failed: {self.errors[0]!r}") from self.errors[0]
        return elapsed


def live_transactions(config: SimConfig) -> List[TxnSpec]:
    """The first live.n_txns transactions of the configured stream."""
    horizon = config.live.n_txns / config.rate_tps * 1.25 + 1.0
    specs = generate_transactions(replace(config, duration_s=horizon))
    if len(specs) < config.live.n_txns:
        raise WorkloadError(f"generated {len(specs)} transactions, need {config.live.n_txns}")
    return specs[:config.live.n_txns]


@dataclass
class LiveRunResult:
    trace_path: Path
    registry_path: Path
    events: int
    elapsed_s: float
    latencies_ns: np.ndarray
    cpu_percent: float

    @property
    def throughput_tps(self) -> float:
        return len(self.latencies_ns) / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def to_dict(self) -> Dict[str, object]:
        return {"trace": str(self.trace_path), "registry": str(self.registry_path), "events": self.events,
                "elapsed_s": self.elapsed_s, "throughput_tps": self.throughput_tps,
                "cpu_percent": self.cpu_percent, "committed": int(len(self.latencies_ns))}


def run_live(config: SimConfig, profile_set: ProfileSet, directory: Optional[Path] = None,
             iteration: int = 0, registry: Optional[FunctionRegistry] = None) -> LiveRunResult:
    """
    Run the live testbed once and write `<trace>.vtrace` plus `<trace>.vreg`

    Raises:
        WorkloadError: a worker thread failed
        OSError: the trace sink could not be written
    """
    validate(config)
    registry = registry or build_registry()
    path = trace_path(iteration, directory or default_trace_dir())
    process = psutil.Process()
    process.cpu_percent(None)
    with TraceSink.open(path) as sink:
        collector = Collector(registry, profile_set, buffer_capacity=config.live.buffer_capacity,
                              spill_sink=sink)
        engine = LiveEngine(config, collector)
        elapsed = engine.run()
        collector.flush_traces(sink)
    registry_path = path.with_suffix(".vreg")
    write_registry(registry_path, registry)
    result = LiveRunResult(path, registry_path, sink.events_written, elapsed,
                           np.asarray(engine.latencies_ns, dtype=np.int64), process.cpu_percent(None))
    logger.info(f"Live run {iteration}: {len(engine.latencies_ns)} txns in {elapsed:.2f}s "
                f"({result.throughput_tps:.0f} tps), {result.events} events -> {path}")
    return result


class LiveRunner:
    """
    Workload runner for iterative refinement

    Each run executes the live testbed under the given profile set and
    returns the rebuilt invocation forest.
    """

    def __init__(self, config: SimConfig, directory: Optional[Path] = None, extra_probes: int = 0):
        self.config = config
        self.directory = directory
        self.registry = build_registry(extra_probes)
        self.graph = call_graph(self.registry)
        self.runs: List[LiveRunResult] = []

    def callees(self, func_id: int) -> Tuple[int, ...]:
        return self.graph.get(func_id, ())

    def run(self, profile_set: ProfileSet, iteration: int) -> Forest:
        result = run_live(self.config, profile_set, self.directory, iteration, self.registry)
        self.runs.append(result)
        events, spills = read_trace(result.trace_path)
        return build_invocations(events, self.registry, spills)


@dataclass
class OverheadResult:
    n_enabled: int
    baseline_tps: float
    probed_tps: float

    @property
    def ratio(self) -> float:
        return self.probed_tps / self.baseline_tps if self.baseline_tps else 0.0


def measure_probe_overhead(config: SimConfig, n_enabled: int = 100, directory: Optional[Path] = None,
                           repeats: int = 3) -> OverheadResult:
    """
    Live throughput with n_enabled probes recording vs none

    Functions beyond the testbed's own are fillers called from service.
    Baseline and probed runs alternate `repeats` times and each side keeps
    its best throughput.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    registry = build_registry(max(0, n_enabled - len(FUNCTIONS)))
    everything = ProfileSet(registry.entries)
    baseline_tps, probed_tps = [], []
    with tempfile.TemporaryDirectory() as scratch:
        target = directory or Path(scratch)
        for attempt in range(repeats):
            baseline = run_live(config, ProfileSet(), target, iteration=2 * attempt, registry=registry)
            probed = run_live(config, everything, target, iteration=2 * attempt + 1, registry=registry)
            baseline_tps.append(baseline.throughput_tps)
            probed_tps.append(probed.throughput_tps)
    result = OverheadResult(len(registry), max(baseline_tps), max(probed_tps))
    logger.info(f"Probe overhead with {result.n_enabled} enabled: throughput ratio {result.ratio:.3f} "
                f"(best of {repeats})")
    return result
