"""Deterministic visit tables derived from visit frequencies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
MAX_PERIOD = 1024


@dataclass(frozen=True)
class VisitTable:
    """A periodic visit sequence over queue indices (0-based)."""

    sequence: tuple[int, ...]

    def __post_init__(self):
        seq = tuple(int(q) for q in self.sequence)
        if not seq or min(seq) < 0:
            raise ValueError("visit table must be a non-empty sequence of queue indices")
        object.__setattr__(self, "sequence", seq)

    @property
    def K(self) -> int:
        return len(self.sequence)

    @property
    def n(self) -> int:
        return max(self.sequence) + 1

    def counts(self, n: int | None = None) -> np.ndarray:
        return np.bincount(self.sequence, minlength=n or self.n)

    def frequencies(self, n: int | None = None) -> np.ndarray:
        return self.counts(n) / self.K

    def max_gaps(self, n: int | None = None) -> np.ndarray:
        """Largest cyclic distance between consecutive visits of each queue."""
        n = n or self.n
        seq = np.asarray(self.sequence)
        gaps = np.zeros(n, dtype=int)
        for q in range(n):
            pos = np.flatnonzero(seq == q)
            if pos.size == 0:
                gaps[q] = self.K
                continue
            d = np.diff(np.append(pos, pos[0] + self.K))
            gaps[q] = d.max()
        return gaps


def largest_remainder(pi, K: int) -> np.ndarray:
    """Integer counts summing to K closest to K*pi (Hamilton rounding, ties by index)."""
    target = np.asarray(pi, dtype=float) * K
    counts = np.floor(target).astype(int)
    short = K - counts.sum()
    if short > 0:
        rem = target - counts
        order = np.lexsort((np.arange(rem.size), -rem))
        counts[order[:short]] += 1
    return counts


def _lift_zero_counts(counts: np.ndarray) -> np.ndarray:
    counts = counts.copy()
    for q in np.flatnonzero(counts == 0):
        counts[int(np.argmax(counts))] -= 1
        counts[q] = 1
    return counts


def golden_ratio_sequence(pi, K: int | None = None) -> VisitTable:
    """Spread visits of each queue evenly over a period using the golden ratio.

    Slot k gets the key frac(k * g), g = (sqrt(5) - 1)/2. Slots sorted by key
    are handed out in contiguous blocks: the first c_1 to queue 0, the next c_2
    to queue 1, and so on, where c are largest-remainder counts of K*pi. Read
    back in slot order, each queue's visits land close to evenly spaced.
    If some queue would get no slot, K is doubled (up to 1024); past that,
    queues still at zero get one slot each, taken from the largest counts.
    """
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    n = pi.size
    if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise ValueError("pi must lie on the open simplex")
    if K is None:
        K = max(n, 8)
    if K < n:
        raise ValueError(f"period K={K} shorter than the number of queues {n}")
    while True:
        counts = largest_remainder(pi, K)
        if counts.min() > 0:
            break
        if K * 2 > MAX_PERIOD:
            counts = _lift_zero_counts(counts)
            break
        K *= 2
    keys = np.mod(np.arange(K) * GOLDEN, 1.0)
    ranked = np.argsort(keys, kind="stable")
    owner = np.repeat(np.arange(n), counts)
    seq = np.empty(K, dtype=int)
    seq[ranked] = owner
    return VisitTable(tuple(seq.tolist()))
