"""
Record Lock Manager

What: Per-record lock queues with shared/exclusive modes and pluggable grant
      policies (FCFS, VATS, ETF, RANDOM), plus the theta tuning sweep
How: Each record owns a LockQueue (holders + ordered waiters); on release the
     manager picks grant candidates in policy order and grants every waiter
     compatible with the holders, starting from the first candidate

Grant rules:
- A new request is granted only when nobody waits and it is compatible with
  every holder; shared requests never pass queued waiters.
- FCFS grants waiters from the head of the queue while they stay compatible.
- ETF and active VATS order waiters by age (oldest transaction first), RANDOM
  by a seeded shuffle; the first candidate must be compatible with the
  remaining holders, after which every other compatible waiter is granted in
  the same order.
- VATS is active only while the wait-lock ratio exceeds theta; otherwise it
  behaves exactly like FCFS.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.errors import DuplicateRequestError, LockNotHeldError, LockProtocolError
from src.metrics import summarize

logger = logging.getLogger(__name__)


class LockMode(str, Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


def compatible(a: LockMode, b: LockMode) -> bool:
    return a is LockMode.SHARED and b is LockMode.SHARED


@dataclass
class LockRequest:
    """
    A transaction's request for one record

    age(t) = t - txn_birth_ns; birth never follows queue arrival.
    """

    txn_id: int
    mode: LockMode
    queue_arrival_ns: float
    txn_birth_ns: float
    granted: bool = False
    granted_ns: Optional[float] = None

    def __post_init__(self):
        if self.txn_birth_ns > self.queue_arrival_ns:
            raise LockProtocolError(f"txn {self.txn_id} born after it reached the queue")

    def age(self, now_ns: float) -> float:
        return now_ns - self.txn_birth_ns


@dataclass
class LockQueue:
    record_id: int
    holders: Dict[int, LockRequest] = field(default_factory=dict)
    waiters: List[LockRequest] = field(default_factory=list)

    def compatible_with_holders(self, mode: LockMode) -> bool:
        return all(compatible(mode, h.mode) for h in self.holders.values())

    def __len__(self) -> int:
        return len(self.holders) + len(self.waiters)


@dataclass(frozen=True)
class SchedulerPolicy:
    """Grant policy: name in fcfs|vats|etf|random; theta gates VATS; seed drives RANDOM."""

    name: str = "fcfs"
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("fcfs", "vats", "etf", "random"):
            raise ValueError(f"unknown scheduler policy {self.name!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be within [0, 1], got {self.theta}")

    @classmethod
    def fcfs(cls) -> "SchedulerPolicy":
        return cls("fcfs")

    @classmethod
    def vats(cls, theta: float = 0.0) -> "SchedulerPolicy":
        return cls("vats", theta=theta)

    @classmethod
    def etf(cls) -> "SchedulerPolicy":
        return cls("etf")

    @classmethod
    def random(cls, seed: int = 0) -> "SchedulerPolicy":
        return cls("random", seed=seed)


class Grant(NamedTuple):
    time_ns: float
    record_id: int
    txn_id: int
    mode: LockMode


GRANTED = "granted"
ENQUEUED = "enqueued"


class LockManager:
    """
    Lock table for one simulation

    Args:
        policy: Grant policy applied on every release
        on_grant: Optional callback(record_id, request) for waiters granted on
                  release (the simulator resumes the owning transaction)
    """

    def __init__(self, policy: Optional[SchedulerPolicy] = None,
                 on_grant: Optional[Callable[[int, LockRequest], None]] = None):
        self.policy = policy or SchedulerPolicy()
        self.on_grant = on_grant
        self.queues: Dict[int, LockQueue] = {}
        self.held: Dict[int, List[int]] = {}
        self.grant_log: List[Grant] = []
        self.n_granted = 0
        self.n_waiting = 0
        self.vats_activations = 0
        self._rng = np.random.default_rng(self.policy.seed)

    # -- requests ----------------------------------------------------------

    def request_lock(self, record_id: int, request: LockRequest, now_ns: float) -> str:
        """
        Grant immediately or enqueue

        Returns:
            str: GRANTED or ENQUEUED

        Raises:
            DuplicateRequestError: the txn already holds or waits on the record
        """
        queue = self.queues.setdefault(record_id, LockQueue(record_id))
        if request.txn_id in queue.holders or any(w.txn_id == request.txn_id for w in queue.waiters):
            raise DuplicateRequestError(f"txn {request.txn_id} already queued on record {record_id}")

        if not queue.waiters and queue.compatible_with_holders(request.mode):
            self._grant(queue, request, now_ns)
            return GRANTED

        queue.waiters.append(request)
        self.n_waiting += 1
        return ENQUEUED

    def release_lock(self, record_id: int, txn_id: int, now_ns: float) -> List[LockRequest]:
        """
        Drop txn's lock on record and grant waiters per the policy

        Returns:
            list: Requests granted by this release, in grant order

        Raises:
            LockNotHeldError: txn does not hold the record
        """
        queue = self.queues.get(record_id)
        if queue is None or txn_id not in queue.holders:
            raise LockNotHeldError(f"txn {txn_id} does not hold record {record_id}")
        del queue.holders[txn_id]
        self.n_granted -= 1
        records = self.held.get(txn_id, [])
        if record_id in records:
            records.remove(record_id)
        if not records:
            self.held.pop(txn_id, None)

        granted = self._grant_waiters(queue, now_ns)
        if not queue.holders and not queue.waiters:
            del self.queues[record_id]
        if self.on_grant is not None:
            for request in granted:
                self.on_grant(record_id, request)
        return granted

    def release_all(self, txn_id: int, now_ns: float) -> List[LockRequest]:
        """Commit-time release of every lock txn holds, in ascending record order."""
        granted = []
        for record_id in sorted(self.held.get(txn_id, [])):
            granted.extend(self.release_lock(record_id, txn_id, now_ns))
        return granted

    # -- grant policy ------------------------------------------------------

    def _grant(self, queue: LockQueue, request: LockRequest, now_ns: float) -> None:
        request.granted = True
        request.granted_ns = now_ns
        queue.holders[request.txn_id] = request
        self.held.setdefault(request.txn_id, []).append(queue.record_id)
        self.n_granted += 1
        self.grant_log.append(Grant(now_ns, queue.record_id, request.txn_id, request.mode))

    def effective_policy(self) -> str:
        """fcfs, etf or random for the next grant decision."""
        name = self.policy.name
        if name == "vats":
            if self.wait_lock_ratio() > self.policy.theta:
                return "etf"
            return "fcfs"
        return name

    def _grant_waiters(self, queue: LockQueue, now_ns: float) -> List[LockRequest]:
        if not queue.waiters:
            return []
        policy = self.effective_policy()
        if self.policy.name == "vats" and policy == "etf":
            self.vats_activations += 1

        granted: List[LockRequest] = []
        if policy == "fcfs":
            while queue.waiters and queue.compatible_with_holders(queue.waiters[0].mode):
                request = queue.waiters.pop(0)
                self.n_waiting -= 1
                self._grant(queue, request, now_ns)
                granted.append(request)
            return granted

        if policy == "etf":
            # oldest txn first; ties on earlier queue arrival, then txn id
            order = sorted(queue.waiters, key=lambda r: (r.txn_birth_ns, r.queue_arrival_ns, r.txn_id))
        else:
            order = [queue.waiters[i] for i in self._rng.permutation(len(queue.waiters))]

        if not queue.compatible_with_holders(order[0].mode):
            return granted
        for request in order:
            if queue.compatible_with_holders(request.mode):
                self._grant(queue, request, now_ns)
                granted.append(request)
        if granted:
            taken = {id(r) for r in granted}
            queue.waiters = [w for w in queue.waiters if id(w) not in taken]
            self.n_waiting -= len(granted)
        return granted

    # -- introspection -----------------------------------------------------

    def wait_lock_ratio(self) -> float:
        total = self.n_waiting + self.n_granted
        return self.n_waiting / total if total else 0.0

    def queue_length(self, record_id: int) -> int:
        queue = self.queues.get(record_id)
        return len(queue.waiters) if queue else 0

    def longest_queue(self) -> int:
        return max((len(q.waiters) for q in self.queues.values()), default=0)

    def check_invariants(self) -> None:
        """
        Raises:
            LockProtocolError: incompatible holders, or waiters stranded on a
                record with no holders
        """
        for record_id, queue in self.queues.items():
            holders = list(queue.holders.values())
            for i, a in enumerate(holders):
                for b in holders[i + 1:]:
                    if not compatible(a.mode, b.mode):
                        raise LockProtocolError(f"record {record_id}: txns {a.txn_id} and {b.txn_id} "
                                                f"hold incompatible locks")
            if queue.waiters and not queue.holders:
                raise LockProtocolError(f"record {record_id}: {len(queue.waiters)} waiters but no holder")


@dataclass
class ThetaSweep:
    best_theta: float
    table: pd.DataFrame


def tune_theta(simulate: Callable[[float], Sequence[float]], grid: Sequence[float],
               tolerance: float = 0.05, progress: bool = False) -> ThetaSweep:
    """
    Pick the VATS activation threshold with the lowest latency variance

    Args:
        simulate: theta -> latency sample of one run with that theta
        grid: Candidate thetas within [0, 1]
        tolerance: Relative band above the minimum variance treated as a tie;
                   among ties the largest theta wins (least scheduling work)

    Returns:
        ThetaSweep: the chosen theta and one row per candidate

    Raises:
        ValueError: empty grid or theta outside [0, 1]
    """
    candidates = sorted(set(float(t) for t in grid))
    if not candidates:
        raise ValueError("theta grid is empty")
    if candidates[0] < 0 or candidates[-1] > 1:
        raise ValueError(f"theta grid must lie within [0, 1], got {candidates}")

    rows = []
    for theta in tqdm(candidates, desc="theta sweep", disable=not progress):
        summary = summarize(simulate(theta))
        rows.append({"theta": theta, "mean_ns": summary.mean_ns, "variance_ns2": summary.variance_ns2,
                     "p99_ns": summary.p99_ns, "l2_norm": summary.lp_norm.value})
    table = pd.DataFrame(rows)

    floor = table["variance_ns2"].min()
    within = table[table["variance_ns2"] <= floor * (1.0 + tolerance)]
    best = float(within["theta"].max())
    table["selected"] = table["theta"] == best
    logger.info(f"Theta sweep over {len(candidates)} candidates selected theta={best}")
    return ThetaSweep(best, table)
