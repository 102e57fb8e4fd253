"""Exact relay positions over unions of convex polygons by branch-and-bound.

Each pair i owns a set of convex polygons; choosing one polygon per pair turns
the position problem into the convex program of :mod:`.convex`. The search
assigns pairs in order of decreasing visit frequency. A partial assignment is
bounded by relaxing every unassigned pair to the convex hull of its polygons
(a superset of its region) and taking the certified dual bound of that
relaxation.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from ..errors import ConvergenceError, GeometryError, SearchLimitError
from ..geometry import ConvexPartitionSet, ConvexPolygon
from .convex import ConvexSolution, convex_subproblem, pairwise_objective, switching_weights

log = logging.getLogger(__name__)

NODE_CAP = 10_000_000


@dataclass(frozen=True)
class RelayProblem:
    partitions: tuple
    pi: np.ndarray
    v: float = 1.0

    def __post_init__(self):
        parts = tuple(self.partitions)
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        if not parts:
            raise ValueError("need at least one pair")
        if len(parts) != pi.size:
            raise ValueError("one partition set per pair is required")
        if any(len(p.polygons) == 0 for p in parts):
            raise ValueError("every partition set must be non-empty")
        if np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-9:
            raise ValueError("pi must lie on the open simplex")
        if self.v <= 0:
            raise ValueError("speed must be positive")
        object.__setattr__(self, "partitions", parts)
        object.__setattr__(self, "pi", pi)

    @property
    def n(self) -> int:
        return len(self.partitions)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(p.m for p in self.partitions)

    def weights(self) -> np.ndarray:
        return switching_weights(self.pi, self.v)

    def diameter(self) -> float:
        V = np.vstack([p.vertices for p in self.partitions])
        return float(np.linalg.norm(V.max(0) - V.min(0)))


@dataclass
class PositionSolution:
    positions: np.ndarray
    assignment: tuple[int, ...]
    objective: float
    lower_bound: float
    nodes: int
    leaves: int
    warm_start_kept: bool = False
    stats: dict = field(default_factory=dict)


def hull_polygon(partition: ConvexPartitionSet) -> ConvexPolygon:
    V = partition.vertices
    try:
        h = ConvexHull(V)
    except Exception as exc:  # qhull raises its own error type for flat inputs
        raise GeometryError(f"cannot form the hull of partition {partition.source_region_id}: {exc}") from exc
    return ConvexPolygon(V[h.vertices])


def _assignment_of(partition: ConvexPartitionSet, x, tol=1e-7) -> int:
    d = [np.max(p.A @ x - p.b) for p in partition.polygons]
    k = int(np.argmin(d))
    return k if d[k] <= tol else -1


def solve_positions(problem: RelayProblem, tol: float | None = None, weights=None, warm_start=None,
                    node_cap: int = NODE_CAP) -> PositionSolution:
    """Globally minimize the pairwise-weighted distance objective over polygon choices.

    ``weights`` defaults to the mean-switching-time weights 2 pi_i pi_j / v;
    any symmetric nonnegative matrix (e.g. a tour's adjacency) is accepted.
    ``tol`` defaults to 1e-4 times the scene diameter divided by v.
    Returns a solution whose objective is within ``tol`` of the optimum; when
    ``warm_start`` positions are given (and feasible), the result is never
    worse than them.
    Ties within tol/2 go to the lexicographically smallest assignment found.
    """
    n = problem.n
    W = problem.weights() if weights is None else np.asarray(weights, dtype=float)
    if tol is None:
        tol = 1e-4 * max(problem.diameter(), 1e-9) / problem.v
    leaf_tol = tol / 2.0
    parts = problem.partitions
    hulls = [hull_polygon(p) if p.m > 1 else p.polygons[0] for p in parts]
    order = sorted(range(n), key=lambda i: (-problem.pi[i], i))
    nodes = 0
    leaves = 0

    inc_f = np.inf
    inc_X = None
    inc_a: tuple | None = None
    best_seen = np.inf

    def offer(f, X, a):
        nonlocal inc_f, inc_X, inc_a, best_seen
        best_seen = min(best_seen, f)
        if inc_a is None or f < inc_f - leaf_tol or (f <= best_seen + leaf_tol and a < inc_a):
            inc_f, inc_X, inc_a = f, X, a

    def leaf(a):
        nonlocal leaves
        leaves += 1
        polys = [parts[i].polygons[a[i]] for i in range(n)]
        return _solve(polys, W, leaf_tol)

    # warm start as an incumbent
    warm_f = np.inf
    if warm_start is not None:
        X0 = np.asarray(warm_start, dtype=float)
        a0 = tuple(_assignment_of(parts[i], X0[i]) for i in range(n))
        if all(k >= 0 for k in a0):
            warm_f = pairwise_objective(X0, W)
            s = leaf(a0)
            offer(s.objective, s.positions, a0)

    # root relaxation and rounding heuristic
    root = _solve(hulls, W, tol)
    nodes += 1
    guess = tuple(_nearest_polygon(parts[i], root.positions[i]) for i in range(n))
    s = leaf(guess)
    offer(s.objective, s.positions, guess)

    # depth-first search; a node is the tuple of assigned polygon indices along ``order``
    def search(depth: int, partial: dict, x_hint):
        nonlocal nodes
        if depth == n:
            a = tuple(partial[i] for i in range(n))
            sol = leaf(a)
            offer(sol.objective, sol.positions, a)
            return
        i = order[depth]
        cand = []
        for k, poly in enumerate(parts[i].polygons):
            dist = float(np.linalg.norm(_project(poly, x_hint[i]) - x_hint[i]))
            cand.append((round(dist, 12), k))
        cand.sort()
        for _, k in cand:
            nodes += 1
            if nodes > node_cap:
                raise SearchLimitError(
                    f"branch-and-bound explored more than {node_cap} nodes; use coarser partitions "
                    "(larger RDP tolerance or alpha)"
                )
            partial[i] = k
            if depth + 1 == n:
                search(depth + 1, partial, x_hint)
            else:
                polys = [parts[j].polygons[partial[j]] if j in partial else hulls[j] for j in range(n)]
                rel = _solve(polys, W, leaf_tol, x0=x_hint, cutoff=inc_f - leaf_tol)
                if rel.bound < inc_f - leaf_tol:
                    search(depth + 1, partial, rel.positions)
            del partial[i]

    if any(m > 1 for m in problem.sizes):
        search(0, {}, root.positions)
    final = PositionSolution(inc_X, inc_a, float(inc_f), float(min(root.bound, inc_f)), nodes, leaves)
    if warm_start is not None and warm_f < final.objective:
        final = PositionSolution(np.asarray(warm_start, dtype=float), a0, warm_f, final.lower_bound, nodes, leaves,
                                 warm_start_kept=True)
    final.stats = {"order": order, "tol": tol}
    return final


def _solve(polys, W, tol, **kw) -> ConvexSolution:
    # an uncertified solve still yields a feasible point and a valid lower bound
    try:
        return convex_subproblem(polys, W, tol, **kw)
    except ConvergenceError as exc:
        log.warning("%s; continuing with the uncertified incumbent", exc)
        return exc.incumbent


def _project(poly: ConvexPolygon, x):
    from .convex import geometry_project

    return geometry_project(poly, x)


def _nearest_polygon(partition: ConvexPartitionSet, x) -> int:
    d = [float(np.linalg.norm(_project(p, x) - x)) for p in partition.polygons]
    return int(np.argmin(d))


def enumerate_positions(problem: RelayProblem, tol: float, weights=None) -> PositionSolution:
    """Solve every assignment; the reference for small instances."""
    W = problem.weights() if weights is None else np.asarray(weights, dtype=float)
    best = None
    count = 0
    for a in itertools.product(*[range(m) for m in problem.sizes]):
        polys = [problem.partitions[i].polygons[a[i]] for i in range(problem.n)]
        s = convex_subproblem(polys, W, tol)
        count += 1
        if best is None or s.objective < best.objective:
            best = PositionSolution(s.positions, a, s.objective, s.bound, count, count)
    best.nodes = best.leaves = count
    return best


def big_m_check(problem: RelayProblem, positions, assignment) -> bool:
    """Check the big-M linearisation accepts a feasible (positions, indicators) pair.

    For pair i and polygon k the constraint A r - b <= c (1 - eta) must hold
    with c larger than max over the bounding box of |A r - b|_inf. Selected
    polygons must be satisfied exactly (eta = 1); the rest only relaxed.
    """
    X = np.asarray(positions, dtype=float)
    for i, part in enumerate(problem.partitions):
        x0, y0, x1, y1 = part.bounding_box
        corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        for k, poly in enumerate(part.polygons):
            c = float(np.abs(corners @ poly.A.T - poly.b).max()) + 1.0
            eta = 1.0 if assignment[i] == k else 0.0
            lhs = poly.A @ X[i] - poly.b
            if np.any(lhs > c * (1.0 - eta) + 1e-7):
                return False
        if not (x0 - 1e-7 <= X[i, 0] <= x1 + 1e-7 and y0 - 1e-7 <= X[i, 1] <= y1 + 1e-7):
            return False
    return True
