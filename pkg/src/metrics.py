"""
Latency Summary Statistics

What: Mean, population variance, nearest-rank percentiles, L_p norms and
      streaming co-moment accumulators over latency samples
How: numpy for the vector math; CoMoment keeps a running mean vector and a
     centered cross-product matrix updated with the pairwise (Chan) merge
     formula, so batches and shards combine exactly

Normalization:
- Every variance and covariance here is the POPULATION form (divide by n).
  Contributions computed downstream in vartree depend on this choice.

Streaming update (one row x, count n -> n+1):
    delta  = x - mean
    mean' = mean + delta / (n + 1)
    C'    = C + outer(delta, x - mean')
Merge of (n_a, mean_a, C_a) and (n_b, mean_b, C_b):
    n     = n_a + n_b
    d     = mean_b - mean_a
    mean  = mean_a + d * n_b / n
    C     = C_a + C_b + outer(d, d) * n_a * n_b / n
Covariance = C / n.
"""

import math
from dataclasses import dataclass, asdict
from typing import Any, Dict, Iterable, Sequence

import numpy as np
import pandas as pd

from src.errors import InsufficientSamplesError


def _as_vector(latencies: Iterable[float]) -> np.ndarray:
    if isinstance(latencies, np.ndarray):
        return latencies.astype(float, copy=False).ravel()
    return np.asarray(list(latencies), dtype=float)


def lp_norm(latencies: Iterable[float], p: float) -> float:
    """
    L_p norm of a latency vector: (sum |l_i|^p)^(1/p)

    Args:
        latencies: Latency samples (any unit)
        p: Real exponent, p >= 1

    Returns:
        float: The norm; 0.0 for an empty vector

    Examples:
        lp_norm([3, 4], 2) -> 5.0
        lp_norm([3, 4], 1) -> 7.0
    """
    if p < 1:
        raise ValueError(f"L_p norm requires p >= 1, got {p}")
    values = np.abs(_as_vector(latencies))
    if values.size == 0:
        return 0.0
    peak = float(values.max())
    if peak == 0.0:
        return 0.0
    # scale by the peak so large ns values raised to p do not overflow
    scaled = values / peak
    return peak * float(np.sum(scaled ** p)) ** (1.0 / p)


def percentile(latencies: Iterable[float], q: float) -> float:
    """
    Nearest-rank percentile (no interpolation)

    The value at 1-based rank ceil(q/100 * n) of the sorted sample.

    Args:
        latencies: Non-empty sample
        q: Percentile in (0, 100]
    """
    if not 0 < q <= 100:
        raise ValueError(f"percentile q must be in (0, 100], got {q}")
    values = np.sort(_as_vector(latencies))
    n = values.size
    if n == 0:
        raise ValueError("percentile of an empty latency vector")
    # round before ceil so 99/100*100 does not land on 99.00000000000001
    rank = math.ceil(round(q * n / 100.0, 9))
    rank = min(max(rank, 1), n)
    return float(values[rank - 1])


def population_variance(latencies: Iterable[float]) -> float:
    values = _as_vector(latencies)
    if values.size == 0:
        return 0.0
    return float(np.mean((values - values.mean()) ** 2))


@dataclass(frozen=True)
class LpNorm:
    p: float
    value: float


@dataclass(frozen=True)
class LatencySummary:
    """
    Summary of one latency sample

    What: n, mean, population variance, p50/p99 and one L_p norm
    How: Built by summarize(); serializes with to_dict() inside result JSON
    """

    n: int
    mean_ns: float
    variance_ns2: float
    p50_ns: float
    p99_ns: float
    lp_norm: LpNorm

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def summarize(latencies: Iterable[float], p: float = 2.0) -> LatencySummary:
    """
    Build a LatencySummary; an empty sample yields an all-zero summary.
    """
    values = _as_vector(latencies)
    if values.size == 0:
        return LatencySummary(0, 0.0, 0.0, 0.0, 0.0, LpNorm(p, 0.0))
    return LatencySummary(
        n=int(values.size),
        mean_ns=float(values.mean()),
        variance_ns2=population_variance(values),
        p50_ns=percentile(values, 50),
        p99_ns=percentile(values, 99),
        lp_norm=LpNorm(p, lp_norm(values, p)),
    )


def relative_change(baseline: float, candidate: float) -> float:
    """(baseline - candidate) / baseline; 0.0 when the baseline is zero."""
    if baseline == 0:
        return 0.0
    return (baseline - candidate) / baseline


class CoMoment:
    """
    Streaming mean / co-moment accumulator for a fixed column set

    What: One-pass covariance over rows of k columns, mergeable across shards
    How: Welford-style row updates and Chan's pairwise merge (see module doc)

    Single-writer; combine per-thread or per-shard accumulators with merge().
    """

    def __init__(self, n_columns: int):
        if n_columns < 1:
            raise ValueError("CoMoment needs at least one column")
        self.n_columns = n_columns
        self.n = 0
        self.means = np.zeros(n_columns, dtype=float)
        self.comoments = np.zeros((n_columns, n_columns), dtype=float)

    def update(self, row: Sequence[float]) -> None:
        x = np.asarray(row, dtype=float)
        if x.shape != (self.n_columns,):
            raise ValueError(f"expected {self.n_columns} columns, got shape {x.shape}")
        self.n += 1
        delta = x - self.means
        self.means += delta / self.n
        self.comoments += np.outer(delta, x - self.means)

    def update_batch(self, rows: Any) -> None:
        """Accumulate a 2-D block by computing its centered moments and merging."""
        block = np.asarray(rows, dtype=float)
        if block.ndim != 2 or block.shape[1] != self.n_columns:
            raise ValueError(f"expected (m, {self.n_columns}) block, got {block.shape}")
        if block.shape[0] == 0:
            return
        other = CoMoment(self.n_columns)
        other.n = block.shape[0]
        other.means = block.mean(axis=0)
        centered = block - other.means
        other.comoments = centered.T @ centered
        self.merge(other)

    def merge(self, other: "CoMoment") -> "CoMoment":
        """Fold `other` into this accumulator in place and return self."""
        if other.n_columns != self.n_columns:
            raise ValueError("cannot merge accumulators with different column sets")
        if other.n == 0:
            return self
        if self.n == 0:
            self.n = other.n
            self.means = other.means.copy()
            self.comoments = other.comoments.copy()
            return self
        total = self.n + other.n
        delta = other.means - self.means
        self.comoments = (self.comoments + other.comoments
                          + np.outer(delta, delta) * (self.n * other.n / total))
        self.means = self.means + delta * (other.n / total)
        self.n = total
        return self

    def covariance(self) -> np.ndarray:
        """Population covariance matrix (C / n); symmetric by construction."""
        if self.n < 2:
            raise InsufficientSamplesError(f"covariance needs >= 2 rows, have {self.n}")
        cov = self.comoments / self.n
        return (cov + cov.T) / 2.0


def covariance_matrix(samples: Any) -> np.ndarray:
    """
    Population covariance matrix of a sample table

    Args:
        samples: A SampleMatrix (anything with a `.frame`), a DataFrame or a
                 2-D array of rows x columns

    Returns:
        np.ndarray: Symmetric k x k matrix; the diagonal holds column variances
    """
    frame = getattr(samples, "frame", samples)
    if isinstance(frame, pd.DataFrame):
        block = frame.to_numpy(dtype=float)
    else:
        block = np.asarray(frame, dtype=float)
    if block.ndim != 2:
        raise ValueError(f"covariance_matrix expects a 2-D table, got {block.ndim}-D")
    if block.shape[0] < 2:
        raise InsufficientSamplesError(f"covariance needs >= 2 rows, have {block.shape[0]}")
    acc = CoMoment(block.shape[1])
    acc.update_batch(block)
    return acc.covariance()
