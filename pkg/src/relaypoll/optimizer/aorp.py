"""Alternating optimization of relay positions and visit frequencies, and the cyclic baseline."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from ..polling import PollingInstance, avg_wait, cyclic_wait, sqrt_rule
from .bnb import RelayProblem, hull_polygon, solve_positions
from .frequencies import optimize_frequencies
from .table import VisitTable, golden_ratio_sequence

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE_TOUR = 8


def switching_matrix(positions, v: float) -> np.ndarray:
    X = np.asarray(positions, dtype=float)
    S = cdist(X, X) / v
    np.fill_diagonal(S, 0.0)
    return S


@dataclass
class RelayPolicy:
    positions: np.ndarray
    pi: np.ndarray
    S: np.ndarray
    w_bar: float
    assignment: tuple
    lam: np.ndarray
    zeta: float
    v: float
    kind: str = "aorp"
    table: VisitTable | None = None
    log: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.pi)

    def instance(self) -> PollingInstance:
        return PollingInstance(self.lam, self.zeta, self.S, self.pi)


def _wait(lam, zeta, S, pi) -> float:
    return avg_wait(PollingInstance(lam, zeta, S, pi))


def aorp(partitions: Sequence, lam, zeta: float, v: float = 1.0, tol: float = 1e-3, max_iters: int = 20,
         K: int | None = None, position_tol: float | None = None, freq_tol: float = 1e-7) -> RelayPolicy:
    """Alternate exact position solves and frequency optimization from the square-root rule.

    Stops when an iteration improves the best wait by less than ``tol`` seconds
    or after ``max_iters`` iterations, and returns the best policy seen. The
    per-step log records the wait after every position and frequency update.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    n = lam.size
    if len(partitions) != n:
        raise ValueError("one partition set per pair is required")
    rho = lam * zeta
    if rho.sum() >= 1:
        PollingInstance(lam, zeta, np.zeros((n, n)), np.full(n, 1.0 / n))  # raises InstabilityError
    pi = sqrt_rule(rho) if n > 1 else np.ones(1)
    X = None
    best = None
    steps = []
    prev_best = np.inf
    for it in range(max_iters):
        sol = solve_positions(RelayProblem(tuple(partitions), pi, v), position_tol, warm_start=X)
        X = sol.positions
        S = switching_matrix(X, v)
        w = _wait(lam, zeta, S, pi)
        steps.append({"iteration": it, "step": "positions", "w_bar": w, "s_bar": float(pi @ S @ pi),
                      "pi": pi.tolist(), "nodes": sol.nodes})
        if best is None or w < best[0]:
            best = (w, X.copy(), pi.copy(), S, sol.assignment)
        pi_new = optimize_frequencies(S, lam, zeta, pi, tol=freq_tol)
        w_new = _wait(lam, zeta, S, pi_new)
        steps.append({"iteration": it, "step": "frequencies", "w_bar": w_new, "s_bar": float(pi_new @ S @ pi_new),
                      "pi": pi_new.tolist()})
        if w_new < best[0]:
            best = (w_new, X.copy(), pi_new.copy(), S, sol.assignment)
        pi = pi_new
        if prev_best - best[0] < tol:
            break
        prev_best = best[0]
    w, X, pi, S, assignment = best
    table = golden_ratio_sequence(pi, K) if n > 1 else VisitTable((0,))
    return RelayPolicy(X, pi, S, w, tuple(assignment), lam, zeta, v, "aorp", table, steps,
                       {"iterations": len(steps) // 2, "tol": tol})


def _tours(n: int):
    if n <= 2:
        yield tuple(range(n))
        return
    for perm in itertools.permutations(range(1, n)):
        if perm[0] < perm[-1]:
            yield (0, *perm)


def tour_weights(tour, v: float = 1.0) -> np.ndarray:
    n = len(tour)
    W = np.zeros((n, n))
    for a, b in zip(tour, tour[1:] + tour[:1]):
        if a != b:
            W[a, b] += 1.0 / v
            W[b, a] += 1.0 / v
    return W


def _nearest_neighbour_tour(points) -> tuple:
    left = list(range(1, len(points)))
    tour = [0]
    while left:
        last = points[tour[-1]]
        k = min(left, key=lambda j: (float(np.linalg.norm(points[j] - last)), j))
        tour.append(k)
        left.remove(k)
    return tuple(tour)


def baseline_cyclic_policy(partitions: Sequence, v: float = 1.0, lam=None, zeta: float | None = None,
                           position_tol: float | None = None) -> RelayPolicy:
    """Uniform frequencies and a fixed cyclic tour of shortest length over the regions.

    Every tour (up to reversal) is tried for n <= 8, each with exact positions
    for its cyclic length; beyond that a nearest-neighbour tour over the region
    hull centroids is used and flagged in the metadata.
    """
    n = len(partitions)
    pi = np.full(n, 1.0 / n)
    problem = RelayProblem(tuple(partitions), pi, v)
    if n <= MAX_EXHAUSTIVE_TOUR:
        tours = list(_tours(n))
        fallback = False
    else:
        cents = np.array([hull_polygon(p).centroid if p.m > 1 else p.polygons[0].centroid for p in partitions])
        tours = [_nearest_neighbour_tour(cents)]
        fallback = True
    best = None
    for tour in tours:
        sol = solve_positions(problem, position_tol, weights=tour_weights(tour, v))
        if best is None or sol.objective < best[0] - 1e-12:
            best = (sol.objective, tour, sol)
    length, tour, sol = best
    S = switching_matrix(sol.positions, v)
    lam_a = np.zeros(n) if lam is None else np.atleast_1d(np.asarray(lam, dtype=float))
    z = 1.0 if zeta is None else zeta
    w = _wait(lam_a, z, S, pi)
    cycle = float(sum(S[a, b] for a, b in zip(tour, tour[1:] + tour[:1]))) if n > 1 else 0.0
    meta = {"tour": list(tour), "tour_time_s": cycle, "nearest_neighbour_fallback": fallback,
            "w_table": cyclic_wait(lam_a, z, cycle)}
    return RelayPolicy(sol.positions, pi, S, w, tuple(sol.assignment), lam_a, z, v, "baseline",
                       VisitTable(tuple(tour)), [], meta)
