"""
Transaction Workloads and Discrete-Event Simulation

What: Generates transaction streams (arrivals, Zipf-skewed record accesses,
      service and log costs), runs them through the lock manager, buffer pool
      and log devices in simulated time, and hosts the single-queue menu
      harness and the standalone buffer-pool contention run
How: Event heap keyed (time_ns, seq) drives a per-transaction state machine:
        arrive -> [lock -> page access -> service] per record -> commit
     Every transaction is generated up front from dedicated numpy streams
     (spawned from one SeedSequence), so runs that differ only in policy see
     the same transactions.

Commit path by log policy:
- eager       log write, then flush on a log device, then release locks
- lazy_flush  log write, then release locks; flushing is off the commit path
- lazy_write  release locks immediately
With two devices a flush waits only when both are busy, and then queues on
the device with fewer pending flushes.

Usage:
    result = run_sim(load_config("configs/contended.toml"))
    print(result.summary.variance_ns2)
"""

import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.bufpool import BufferPool, PoolStats, lognormal_sampler
from src.config import BufPoolConfig, SimConfig, validate
from src.errors import SaturationError, WorkloadError
from src.lockmgr import GRANTED, LockManager, LockMode, LockRequest, SchedulerPolicy
from src.metrics import LatencySummary, lp_norm, summarize

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000

PHASES = ("lock_wait_ns", "bufpool_wait_ns", "service_ns", "log_wait_ns")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class ZipfSampler:
    """
    Inverse-CDF sampler over ranks 1..n with P(rank i) proportional to 1 / i**s

    Samples are 0-based indices (index 0 is rank 1).
    """

    def __init__(self, n: int, s: float):
        if n < 1:
            raise ValueError(f"zipf support must be >= 1, got {n}")
        if s < 0:
            raise ValueError(f"zipf exponent must be >= 0, got {s}")
        self.n = n
        self.s = s
        weights = np.arange(1, n + 1, dtype=float) ** -s
        self.probabilities = weights / weights.sum()
        self.cdf = np.cumsum(self.probabilities)
        self.cdf[-1] = 1.0

    def sample(self, rng: np.random.Generator, size: Any = None) -> Any:
        draws = np.searchsorted(self.cdf, rng.random(size), side="right")
        return np.minimum(draws, self.n - 1)


def sample_zipf(n: int, s: float, rng: np.random.Generator) -> int:
    """One Zipf draw; see ZipfSampler for repeated draws over the same support."""
    return int(ZipfSampler(n, s).sample(rng))


def lognormal_ns(rng: np.random.Generator, mean_ns: float, sigma: float, size: int) -> np.ndarray:
    if sigma <= 0:
        return np.full(size, int(round(mean_ns)), dtype=np.int64)
    mu = math.log(mean_ns) - sigma * sigma / 2.0
    return np.rint(rng.lognormal(mu, sigma, size)).astype(np.int64)


# ---------------------------------------------------------------------------
# Transaction generation
# ---------------------------------------------------------------------------

@dataclass
class TxnSpec:
    """
    A generated transaction

    accesses are sorted by record id (acquisition order); service_ns[i] is the
    work done after locking accesses[i].
    """

    txn_id: int
    birth_ns: int
    accesses: List[Tuple[int, LockMode]]
    service_ns: List[int]
    log_write_ns: int
    log_flush_ns: int

    @property
    def n_writes(self) -> int:
        return sum(1 for _, mode in self.accesses if mode is LockMode.EXCLUSIVE)


class Streams(NamedTuple):
    arrivals: np.random.Generator
    mix: np.random.Generator
    service: np.random.Generator
    bufpool: np.random.Generator
    log: np.random.Generator
    scheduler: np.random.Generator


def spawn_streams(seed: int) -> Streams:
    return Streams(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)))


def arrival_times(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Arrival instants in [0, duration) for the configured process."""
    horizon = int(config.duration_s * NS_PER_S)
    mean_gap = NS_PER_S / config.rate_tps
    expected = int(config.rate_tps * config.duration_s)
    chunks = []
    last = 0.0
    while True:
        size = max(16, expected // 4 + 16)
        if config.arrival == "poisson":
            gaps = rng.exponential(mean_gap, size)
        else:
            gaps = mean_gap * rng.uniform(1.0 - config.jitter, 1.0 + config.jitter, size)
        times = last + np.cumsum(gaps)
        chunks.append(times)
        last = float(times[-1])
        if last >= horizon:
            break
    times = np.concatenate(chunks)
    # the first transaction arrives one gap after time zero
    return times[times < horizon].astype(np.int64)


def generate_transactions(config: SimConfig, streams: Optional[Streams] = None) -> List[TxnSpec]:
    """
    All transactions of a run, in arrival order

    Records are Zipf ranks mapped through a seeded permutation of record ids,
    so the hot records are scattered over the id space.
    """
    streams = streams or spawn_streams(config.seed)
    txn_cfg = config.txn
    births = arrival_times(config, streams.arrivals)
    zipf = ZipfSampler(config.n_records, config.zipf_s)
    permutation = streams.mix.permutation(config.n_records)

    specs = []
    for txn_id, birth in enumerate(births.tolist()):
        wanted = int(streams.mix.integers(txn_cfg.min_accesses, txn_cfg.max_accesses + 1))
        records: Dict[int, LockMode] = {}
        draws = 0
        while len(records) < wanted and draws < 64 * wanted:
            record = int(permutation[zipf.sample(streams.mix)])
            write = streams.mix.random() < txn_cfg.write_ratio
            draws += 1
            if write or record not in records:
                records[record] = LockMode.EXCLUSIVE if write else records.get(record, LockMode.SHARED)
        accesses = sorted(records.items())
        service = lognormal_ns(streams.service, txn_cfg.service_mean_ns, txn_cfg.service_sigma,
                               len(accesses)).tolist()

        n_writes = sum(1 for _, mode in accesses if mode is LockMode.EXCLUSIVE)
        log_bytes = max(1, n_writes) * txn_cfg.log_bytes_per_write
        blocks = math.ceil(log_bytes / config.log.block_size)
        write_ns = int(lognormal_ns(streams.log, config.log.write_ns, config.log.write_sigma, 1)[0])
        flush_ns = blocks * int(lognormal_ns(streams.log, config.log.flush_ns, config.log.flush_sigma, 1)[0])
        specs.append(TxnSpec(txn_id, int(birth), accesses, service, write_ns, flush_ns))
    return specs


# ---------------------------------------------------------------------------
# Discrete-event simulation
# ---------------------------------------------------------------------------

class LogDevice:
    """FIFO flush server; pending holds finish times of accepted flushes."""

    def __init__(self, index: int):
        self.index = index
        self.pending: Deque[int] = deque()

    def waiters(self, now_ns: int) -> int:
        while self.pending and self.pending[0] <= now_ns:
            self.pending.popleft()
        return len(self.pending)

    def submit(self, now_ns: int, service_ns: int) -> int:
        start = self.pending[-1] if self.pending and self.pending[-1] > now_ns else now_ns
        finish = start + service_ns
        self.pending.append(finish)
        return finish


def pick_device(devices: Sequence[LogDevice], now_ns: int) -> LogDevice:
    """First idle device, else the one with fewer pending flushes (lower index on ties)."""
    loads = [(device.waiters(now_ns), device.index) for device in devices]
    for load, index in loads:
        if load == 0:
            return devices[index]
    return devices[min(loads)[1]]


@dataclass
class TxnState:
    spec: TxnSpec
    step: int = 0
    wait_started_ns: int = 0
    commit_started_ns: int = 0
    lock_wait_ns: int = 0
    bufpool_wait_ns: int = 0
    service_ns: int = 0
    log_wait_ns: int = 0
    commit_ns: int = 0


# event kinds, ordered so that same-time events resolve deterministically by seq
ARRIVE, LOCKED, STEP, WRITTEN, FLUSHED = range(5)


@dataclass
class SimResult:
    """
    Outcome of one simulation

    latencies_ns are ordered by txn id; phases has one row per committed txn
    and its four phase columns sum to latency_ns.
    """

    latencies_ns: np.ndarray
    phases: pd.DataFrame
    event_counts: Dict[str, int]
    summary: LatencySummary
    config: Dict[str, Any] = field(default_factory=dict)
    pool_stats: Optional[PoolStats] = None

    @property
    def committed(self) -> int:
        return int(self.latencies_ns.size)

    @property
    def throughput_tps(self) -> float:
        duration = self.config.get("duration_s") or 0
        return self.committed / duration if duration else 0.0

    def phase_breakdown(self) -> pd.DataFrame:
        rows = []
        total_mean = float(self.phases["latency_ns"].mean()) if len(self.phases) else 0.0
        for phase in PHASES:
            column = self.phases[phase].to_numpy(dtype=float) if len(self.phases) else np.zeros(0)
            mean = float(column.mean()) if column.size else 0.0
            rows.append({
                "phase": phase,
                "mean_ns": mean,
                "variance_ns2": float(column.var()) if column.size else 0.0,
                "share_of_mean": mean / total_mean if total_mean else 0.0,
            })
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        document = {
            "config": self.config,
            "summary": self.summary.to_dict(),
            "committed": self.committed,
            "throughput_tps": self.throughput_tps,
            "event_counts": dict(self.event_counts),
            "phase_breakdown": self.phase_breakdown().to_dict(orient="records"),
            "latencies_ns": [int(v) for v in self.latencies_ns],
        }
        if self.pool_stats is not None:
            document["bufpool"] = self.pool_stats.to_dict()
        return document


class Simulator:
    """
    Single-threaded discrete-event run of one SimConfig

    Raises (from run):
        SaturationError: a lock queue exceeds max_waiters or in-flight
            transactions exceed max_inflight
    """

    def __init__(self, config: SimConfig):
        self.config = validate(config)
        self.streams = spawn_streams(config.seed)
        self.specs = generate_transactions(config, self.streams)
        scheduler_seed = int(self.streams.scheduler.integers(0, 2 ** 31 - 1))
        policy = SchedulerPolicy(config.scheduler, theta=config.vats.theta, seed=scheduler_seed)
        self.manager = LockManager(policy, on_grant=self._on_grant)
        self.pool = (BufferPool.from_config(config.bufpool, self.streams.bufpool)
                     if config.bufpool.enabled else None)
        self.devices = [LogDevice(i) for i in range(config.log.devices)]
        self.log_buffer_free_ns = 0
        self.heap: List[Tuple[int, int, int, int]] = []
        self._seq = itertools.count()
        self.now = 0
        self.active: Dict[int, TxnState] = {}
        self.finished: List[TxnState] = []
        self.counts: Dict[str, int] = {
            "arrivals": 0, "lock_requests": 0, "lock_waits": 0, "bufpool_accesses": 0,
            "log_writes": 0, "log_flushes": 0, "commits": 0,
        }

    def _schedule(self, time_ns: int, kind: int, txn_id: int) -> None:
        heapq.heappush(self.heap, (time_ns, next(self._seq), kind, txn_id))

    def _diagnostic(self, **extra: Any) -> Dict[str, Any]:
        return {"now_ns": self.now, "inflight": len(self.active), "committed": len(self.finished),
                "longest_queue": self.manager.longest_queue(),
                "wait_lock_ratio": self.manager.wait_lock_ratio(), **extra}

    # -- state machine -----------------------------------------------------

    def _arrive(self, txn_id: int) -> None:
        spec = self.specs[txn_id]
        state = TxnState(spec)
        self.active[txn_id] = state
        self.counts["arrivals"] += 1
        if len(self.active) > self.config.max_inflight:
            raise SaturationError(
                f"{len(self.active)} transactions in flight exceeds max_inflight={self.config.max_inflight}",
                self._diagnostic())
        if txn_id + 1 < len(self.specs):
            self._schedule(self.specs[txn_id + 1].birth_ns, ARRIVE, txn_id + 1)
        self._next_access(state)

    def _next_access(self, state: TxnState) -> None:
        spec = state.spec
        if state.step >= len(spec.accesses):
            self._commit(state)
            return
        record_id, mode = spec.accesses[state.step]
        request = LockRequest(spec.txn_id, mode, self.now, spec.birth_ns)
        self.counts["lock_requests"] += 1
        outcome = self.manager.request_lock(record_id, request, self.now)
        if outcome == GRANTED:
            self._locked(state)
            return
        self.counts["lock_waits"] += 1
        state.wait_started_ns = self.now
        queued = self.manager.queue_length(record_id)
        if queued > self.config.max_waiters:
            raise SaturationError(
                f"record {record_id} has {queued} waiters, exceeds max_waiters={self.config.max_waiters}",
                self._diagnostic(record_id=record_id, queue_length=queued))

    def _on_grant(self, record_id: int, request: LockRequest) -> None:
        state = self.active[request.txn_id]
        state.lock_wait_ns += self.now - state.wait_started_ns
        self._schedule(self.now, LOCKED, request.txn_id)

    def _locked(self, state: TxnState) -> None:
        spec = state.spec
        record_id, _ = spec.accesses[state.step]
        delay = 0
        if self.pool is not None:
            self.counts["bufpool_accesses"] += 1
            page = record_id % self.config.bufpool.n_pages
            worker = spec.txn_id % self.config.bufpool.threads
            result = self.pool.access_page(page, self.now, thread_id=worker)
            buf = result.wait_ns + result.hold_ns + (0 if result.hit else self.config.bufpool.miss_ns)
            state.bufpool_wait_ns += buf
            delay += buf
        service = spec.service_ns[state.step]
        state.service_ns += service
        delay += service
        state.step += 1
        self._schedule(self.now + delay, STEP, spec.txn_id)

    def _commit(self, state: TxnState) -> None:
        state.commit_started_ns = self.now
        if self.config.log.policy == "lazy_write":
            self._finish(state)
            return
        self.counts["log_writes"] += 1
        start = max(self.now, self.log_buffer_free_ns)
        self.log_buffer_free_ns = start + state.spec.log_write_ns
        self._schedule(self.log_buffer_free_ns, WRITTEN, state.spec.txn_id)

    def _written(self, state: TxnState) -> None:
        if self.config.log.policy == "lazy_flush":
            self._finish(state)
            return
        self.counts["log_flushes"] += 1
        device = pick_device(self.devices, self.now)
        finish = device.submit(self.now, state.spec.log_flush_ns)
        self._schedule(finish, FLUSHED, state.spec.txn_id)

    def _finish(self, state: TxnState) -> None:
        state.log_wait_ns = self.now - state.commit_started_ns
        state.commit_ns = self.now
        self.counts["commits"] += 1
        del self.active[state.spec.txn_id]
        self.finished.append(state)
        self.manager.release_all(state.spec.txn_id, self.now)

    # -- driver ------------------------------------------------------------

    def run(self) -> SimResult:
        if self.specs:
            self._schedule(self.specs[0].birth_ns, ARRIVE, 0)
        while self.heap:
            self.now, _, kind, txn_id = heapq.heappop(self.heap)
            if kind == ARRIVE:
                self._arrive(txn_id)
                continue
            state = self.active[txn_id]
            if kind == LOCKED:
                self._locked(state)
            elif kind == STEP:
                self._next_access(state)
            elif kind == WRITTEN:
                self._written(state)
            else:
                self._finish(state)

        if self.active:
            raise WorkloadError(f"{len(self.active)} transactions never committed")
        self.manager.check_invariants()
        return self._result()

    def _result(self) -> SimResult:
        done = sorted(self.finished, key=lambda s: s.spec.txn_id)
        phases = pd.DataFrame({
            "txn_id": [s.spec.txn_id for s in done],
            "birth_ns": [s.spec.birth_ns for s in done],
            "commit_ns": [s.commit_ns for s in done],
            "latency_ns": [s.commit_ns - s.spec.birth_ns for s in done],
            "lock_wait_ns": [s.lock_wait_ns for s in done],
            "bufpool_wait_ns": [s.bufpool_wait_ns for s in done],
            "service_ns": [s.service_ns for s in done],
            "log_wait_ns": [s.log_wait_ns for s in done],
        }, dtype=np.int64)
        latencies = phases["latency_ns"].to_numpy(dtype=np.int64)
        counts = dict(self.counts)
        counts["lock_grants_on_release"] = len(self.manager.grant_log) - (
            self.counts["lock_requests"] - self.counts["lock_waits"])
        counts["vats_activations"] = self.manager.vats_activations
        if self.pool is not None:
            counts["make_young"] = self.pool.stats.make_young
            counts["deferred"] = self.pool.stats.deferred
        return SimResult(latencies, phases, counts, summarize(latencies), self.config.to_dict(),
                         self.pool.stats if self.pool is not None else None)


def run_sim(config: SimConfig) -> SimResult:
    """
    Simulate one configuration end to end

    Deterministic: the same config (seed included) gives an identical result.
    """
    result = Simulator(config).run()
    logger.info(f"Simulated {result.committed} txns ({config.scheduler}, log={config.log.policy}): "
                f"mean {result.summary.mean_ns:.0f} ns, variance {result.summary.variance_ns2:.4g} ns^2")
    return result


# ---------------------------------------------------------------------------
# Single-queue menus
# ---------------------------------------------------------------------------

class MenuEntry(NamedTuple):
    txn_id: int
    age: float
    arrival: float


@dataclass
class Menu:
    """Requests for one exclusive lock queue; arrival times never decrease."""

    entries: List[MenuEntry]

    def __post_init__(self):
        arrivals = [e.arrival for e in self.entries]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("menu arrival times must be non-decreasing")
        if any(e.age < 0 for e in self.entries):
            raise ValueError("menu ages must be >= 0")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RemainingTimeModel:
    """i.i.d. remaining time after a grant: exponential{mean}, lognormal{mean, sigma} or constant{mean}."""

    distribution: str = "exponential"
    mean: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.distribution not in ("exponential", "lognormal", "constant"):
            raise ValueError(f"unknown remaining-time distribution {self.distribution!r}")
        if not self.mean > 0 or not math.isfinite(self.mean):
            raise ValueError("remaining-time mean must be finite and > 0")

    def sample(self, rng: np.random.Generator, size: Any) -> np.ndarray:
        if self.distribution == "exponential":
            return rng.exponential(self.mean, size)
        if self.distribution == "lognormal":
            mu = math.log(self.mean) - self.sigma * self.sigma / 2.0
            return rng.lognormal(mu, self.sigma, size)
        return np.full(size, self.mean, dtype=float)


def generate_menu(rng: np.random.Generator, n: int, mean_age: float = 1.0, mean_gap: float = 0.5) -> Menu:
    """Random menu: exponential inter-arrival gaps; ages drawn independently."""
    if n < 1:
        raise ValueError("menu needs at least one transaction")
    arrivals = np.concatenate([[0.0], np.cumsum(rng.exponential(mean_gap, n - 1))])
    ages = rng.exponential(mean_age, n)
    return Menu([MenuEntry(i, float(ages[i]), float(arrivals[i])) for i in range(n)])


def menu_latencies(menu: Menu, remaining: Sequence[float], policy: SchedulerPolicy) -> np.ndarray:
    """
    Latencies (age + wait + remaining) of one menu realization

    remaining[i] is the hold time of entry i once granted.
    """
    manager = LockManager(policy)
    entries = menu.entries
    births = {e.txn_id: e.arrival - e.age for e in entries}
    hold = {e.txn_id: float(remaining[i]) for i, e in enumerate(entries)}
    latencies = np.zeros(len(entries))
    index_of = {e.txn_id: i for i, e in enumerate(entries)}

    holder: Optional[int] = None
    finish = math.inf
    nxt = 0
    while nxt < len(entries) or holder is not None:
        arrival = entries[nxt].arrival if nxt < len(entries) else math.inf
        if holder is not None and finish <= arrival:
            now = finish
            latencies[index_of[holder]] = now - births[holder]
            granted = manager.release_lock(0, holder, now)
            holder, finish = None, math.inf
            if granted:
                holder = granted[0].txn_id
                finish = now + hold[holder]
            continue
        entry = entries[nxt]
        nxt += 1
        request = LockRequest(entry.txn_id, LockMode.EXCLUSIVE, entry.arrival, births[entry.txn_id])
        if manager.request_lock(0, request, entry.arrival) == GRANTED:
            holder = entry.txn_id
            finish = entry.arrival + hold[holder]
    return latencies


@dataclass(frozen=True)
class MenuEstimate:
    policy: str
    mean: float
    stderr: float
    trials: int


def run_menu(menu: Menu, model: RemainingTimeModel, policy: SchedulerPolicy, trials: int,
             p: float = 2.0, seed: int = 0) -> MenuEstimate:
    """
    Monte Carlo estimate of the expected L_p norm of a policy on a menu

    Remaining times are drawn up front from `seed`, so calls with the same
    seed and different policies share them.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    remaining = model.sample(rng, (trials, len(menu)))
    norms = np.empty(trials)
    for trial in range(trials):
        trial_policy = replace(policy, seed=policy.seed + trial)
        norms[trial] = lp_norm(menu_latencies(menu, remaining[trial], trial_policy), p)
    stderr = float(norms.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return MenuEstimate(policy.name, float(norms.mean()), stderr, trials)


def evaluate_menus(menus: Sequence[Menu], model: RemainingTimeModel, policies: Sequence[SchedulerPolicy],
                   trials: int, p: float = 2.0, seed: int = 0, progress: bool = False) -> pd.DataFrame:
    """One row per (menu, policy) with the estimate and its standard error."""
    rows = []
    for index, menu in enumerate(tqdm(menus, desc="menus", disable=not progress)):
        for policy in policies:
            estimate = run_menu(menu, model, policy, trials, p, seed=seed + index)
            rows.append({"menu": index, "n_txns": len(menu), "policy": policy.name,
                         "mean": estimate.mean, "stderr": estimate.stderr, "trials": trials})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Buffer-pool contention run
# ---------------------------------------------------------------------------

@dataclass
class PoolRunResult:
    mode: str
    stats: PoolStats
    elapsed_ns: int

    @property
    def wait_summary(self) -> LatencySummary:
        return self.stats.wait_summary()

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode, "elapsed_ns": self.elapsed_ns, **self.stats.to_dict()}


def simulate_pool(config: BufPoolConfig, seed: int = 42, mode: Optional[str] = None) -> PoolRunResult:
    """
    Closed-loop contention run of the buffer pool alone

    config.threads simulated threads each issue config.accesses_per_thread
    Zipf page accesses separated by exponential think times. A thread stays
    busy for its list-lock wait, its hold time and miss_ns on a miss. Page
    draws and think times come from their own stream, so baseline and llu
    runs replay the same per-thread access sequence.
    """
    mode = mode or config.mode
    access_seed, lock_seed = np.random.SeedSequence(seed).spawn(2)
    access_rng = np.random.default_rng(access_seed)
    pool = BufferPool(config.capacity, config.old_fraction, mode, config.spin_timeout_ns,
                      lognormal_sampler(np.random.default_rng(lock_seed),
                                        config.critical_section_ns, config.critical_section_sigma))

    n = config.accesses_per_thread
    pages = ZipfSampler(config.n_pages, config.zipf_s).sample(access_rng, size=(config.threads, n))
    thinks = access_rng.exponential(config.think_ns, size=(config.threads, n)).astype(np.int64)

    heap = [(int(thinks[t, 0]), t, 0) for t in range(config.threads)]
    heapq.heapify(heap)
    end = 0
    while heap:
        now, thread, step = heapq.heappop(heap)
        result = pool.access_page(int(pages[thread, step]), now, thread)
        busy = result.wait_ns + result.hold_ns + (0 if result.hit else config.miss_ns)
        end = max(end, now + busy)
        if step + 1 < n:
            heapq.heappush(heap, (now + busy + int(thinks[thread, step + 1]), thread, step + 1))

    logger.info(f"Pool simulation ({mode}): hit rate {pool.stats.hit_rate:.3f}, "
                f"{pool.stats.make_young} make-young, {pool.stats.deferred} deferred")
    return PoolRunResult(mode, pool.stats, end)
