"""
Buffer Pool with Young/Old LRU Sublists

What: A page cache whose LRU list is split into a young head and an old tail
      (old_fraction of resident pages), a contended list lock guarding
      make-young moves, and two update modes:
        baseline  make-young waits for the list lock as long as it takes
        llu       make-young spins at most spin_timeout_ns, otherwise the page
                  goes to the accessing thread's backlog; the backlog is
                  drained on that thread's next successful acquisition
How: OrderedDicts for both sublists (first item = head). In simulated time the
     list lock is a FIFO server: free_at_ns is when the current holder leaves.
     LiveBufferPool swaps in a threading.Lock for real threads.

Invariants:
- young + old never exceeds capacity; victims come from the old tail only
- after every mutation len(old) == floor(old_fraction * resident)
- hits in the young sublist never touch the list lock
"""

import logging
import math
import threading
import time
from collections import OrderedDict
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, ContextManager, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from src.config import BufPoolConfig
from src.metrics import LatencySummary, summarize

logger = logging.getLogger(__name__)

DEFAULT_SPIN_TIMEOUT_NS = 10_000


class AccessResult(NamedTuple):
    """Outcome of one page access; hold_ns is list-lock time spent holding it."""

    hit: bool
    wait_ns: int
    hold_ns: int = 0
    deferred: bool = False
    moved: int = 0


class AuditEntry(NamedTuple):
    time_ns: int
    thread_id: int
    page_id: int
    action: str


@dataclass
class PoolStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    make_young: int = 0
    deferred: int = 0
    drained: int = 0
    wait_ns: List[int] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def wait_summary(self) -> LatencySummary:
        return summarize(self.wait_ns)

    def to_dict(self) -> Dict[str, object]:
        return {
            "accesses": self.accesses,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hit_rate,
            "evictions": self.evictions,
            "make_young": self.make_young,
            "deferred": self.deferred,
            "drained": self.drained,
            "wait": self.wait_summary().to_dict(),
        }


def lognormal_sampler(rng: np.random.Generator, mean_ns: float, sigma: float) -> Callable[[], int]:
    """Integer-ns lognormal draws with the given mean; sigma 0 gives a constant."""
    if sigma <= 0:
        value = int(round(mean_ns))
        return lambda: value
    mu = math.log(mean_ns) - sigma * sigma / 2.0
    return lambda: int(round(rng.lognormal(mu, sigma)))


class BufferPool:
    """
    Simulated-time buffer pool

    Args:
        capacity: Max resident pages
        old_fraction: Share of resident pages kept on the old sublist
        mode: "baseline" or "llu"
        spin_timeout_ns: LLU bound on list-lock waits
        critical_section: Returns the list-lock hold time of one page move
    """

    def __init__(self, capacity: int, old_fraction: float = 3 / 8, mode: str = "baseline",
                 spin_timeout_ns: int = DEFAULT_SPIN_TIMEOUT_NS,
                 critical_section: Optional[Callable[[], int]] = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if mode not in ("baseline", "llu"):
            raise ValueError(f"unknown LRU update mode {mode!r}")
        self.capacity = capacity
        self.old_fraction = old_fraction
        self.mode = mode
        self.spin_timeout_ns = spin_timeout_ns
        self.critical_section = critical_section or (lambda: 0)
        self.young: "OrderedDict[int, None]" = OrderedDict()
        self.old: "OrderedDict[int, None]" = OrderedDict()
        self.backlogs: Dict[int, "OrderedDict[int, None]"] = {}
        self.free_at_ns = 0
        self.stats = PoolStats()
        self.audit: List[AuditEntry] = []

    @classmethod
    def from_config(cls, config: BufPoolConfig, rng: np.random.Generator) -> "BufferPool":
        return cls(config.capacity, config.old_fraction, config.mode, config.spin_timeout_ns,
                   lognormal_sampler(rng, config.critical_section_ns, config.critical_section_sigma))

    # -- list structure ----------------------------------------------------

    @property
    def resident(self) -> int:
        return len(self.young) + len(self.old)

    def __contains__(self, page_id: int) -> bool:
        return page_id in self.young or page_id in self.old

    def old_target(self) -> int:
        return int(math.floor(self.old_fraction * self.resident))

    @staticmethod
    def _push_head(sublist: "OrderedDict[int, None]", page_id: int) -> None:
        sublist[page_id] = None
        sublist.move_to_end(page_id, last=False)

    def _rebalance(self) -> None:
        target = self.old_target()
        while len(self.old) < target and self.young:
            page_id, _ = self.young.popitem(last=True)
            self._push_head(self.old, page_id)
        while len(self.old) > target:
            page_id, _ = self.old.popitem(last=False)
            self.young[page_id] = None

    def _evict(self) -> int:
        if not self.old:
            page_id, _ = self.young.popitem(last=True)
            self._push_head(self.old, page_id)
        victim, _ = self.old.popitem(last=True)
        self.stats.evictions += 1
        return victim

    def _insert_miss(self, page_id: int) -> None:
        if self.resident >= self.capacity:
            self._evict()
        self._push_head(self.old, page_id)
        self._rebalance()

    def _move_young(self, page_id: int) -> None:
        self.old.pop(page_id, None)
        self.young.pop(page_id, None)
        self._push_head(self.young, page_id)
        self._rebalance()

    def lists(self) -> Tuple[List[int], List[int]]:
        """(young head..tail, old head..tail) snapshot."""
        return list(self.young), list(self.old)

    # -- backlog -----------------------------------------------------------

    def backlog(self, thread_id: int) -> List[int]:
        return list(self.backlogs.get(thread_id, ()))

    def defer(self, thread_id: int, page_id: int) -> None:
        backlog = self.backlogs.setdefault(thread_id, OrderedDict())
        backlog.pop(page_id, None)
        backlog[page_id] = None
        self.stats.deferred += 1

    def drain_backlog(self, thread_id: int, now_ns: int = 0) -> int:
        """
        Move every still-resident backlog page to the young head

        Caller holds the list lock. Evicted pages are dropped.

        Returns:
            int: Pages moved
        """
        backlog = self.backlogs.pop(thread_id, None)
        if not backlog:
            return 0
        moved = 0
        for page_id in backlog:
            if page_id in self:
                self._move_young(page_id)
                self.audit.append(AuditEntry(now_ns, thread_id, page_id, "moved"))
                moved += 1
            else:
                self.audit.append(AuditEntry(now_ns, thread_id, page_id, "dropped"))
        self.stats.drained += moved
        return moved

    # -- access ------------------------------------------------------------

    def access_page(self, page_id: int, now_ns: int, thread_id: int = 0,
                    mode: Optional[str] = None) -> AccessResult:
        """
        Look up a page at simulated time now_ns

        Calls must arrive in non-decreasing now_ns order (the list lock is a
        FIFO server over simulated time).
        """
        mode = mode or self.mode
        self.stats.accesses += 1

        if page_id in self.young:
            self.stats.hits += 1
            return AccessResult(True, 0)

        if page_id not in self.old:
            self.stats.misses += 1
            self._insert_miss(page_id)
            return AccessResult(False, 0)

        self.stats.hits += 1
        wait = max(0, self.free_at_ns - now_ns)
        if mode == "llu" and wait > self.spin_timeout_ns:
            self.defer(thread_id, page_id)
            self.stats.wait_ns.append(self.spin_timeout_ns)
            return AccessResult(True, self.spin_timeout_ns, deferred=True)

        start = now_ns + wait
        moved = self.drain_backlog(thread_id, start) if mode == "llu" else 0
        self._move_young(page_id)
        self.stats.make_young += 1
        hold = sum(self.critical_section() for _ in range(moved + 1))
        self.free_at_ns = start + hold
        self.stats.wait_ns.append(wait)
        return AccessResult(True, wait, hold, moved=moved)

    def pool_stats(self) -> PoolStats:
        return self.stats


class LiveBufferPool(BufferPool):
    """
    Buffer pool shared by real threads

    Structure changes happen under one threading.Lock; LLU make-young uses a
    bounded acquire. make_young_scope wraps each list-maintenance step (used
    by the testbed to place a probe there).
    """

    def __init__(self, capacity: int, old_fraction: float = 3 / 8, mode: str = "baseline",
                 spin_timeout_ns: int = DEFAULT_SPIN_TIMEOUT_NS,
                 make_young_scope: Optional[Callable[[], ContextManager]] = None):
        super().__init__(capacity, old_fraction, mode, spin_timeout_ns)
        self.list_lock = threading.Lock()
        self.make_young_scope = make_young_scope or nullcontext
        self._stats_lock = threading.Lock()

    def access_page(self, page_id: int, now_ns: int = 0, thread_id: int = 0,
                    mode: Optional[str] = None) -> AccessResult:
        mode = mode or self.mode
        with self.make_young_scope():
            if page_id in self.young:
                with self._stats_lock:
                    self.stats.accesses += 1
                    self.stats.hits += 1
                return AccessResult(True, 0)

            begin = time.perf_counter_ns()
            if mode == "llu":
                acquired = self.list_lock.acquire(timeout=self.spin_timeout_ns / 1e9)
            else:
                acquired = self.list_lock.acquire()
            wait = time.perf_counter_ns() - begin

            if not acquired:
                if page_id in self.old:
                    with self._stats_lock:
                        self.stats.accesses += 1
                        self.stats.hits += 1
                        self.defer(thread_id, page_id)
                        self.stats.wait_ns.append(wait)
                    return AccessResult(True, wait, deferred=True)
                # a miss cannot be deferred
                self.list_lock.acquire()
                wait = time.perf_counter_ns() - begin

            try:
                moved = self.drain_backlog(thread_id) if mode == "llu" else 0
                with self._stats_lock:
                    self.stats.accesses += 1
                    if page_id in self:
                        self.stats.hits += 1
                        self._move_young(page_id)
                        self.stats.make_young += 1
                        self.stats.wait_ns.append(wait)
                        return AccessResult(True, wait, moved=moved)
                    self.stats.misses += 1
                    self._insert_miss(page_id)
                    return AccessResult(False, wait, moved=moved)
            finally:
                self.list_lock.release()

