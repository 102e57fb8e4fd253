"""Relay positions for a fixed polygon assignment.

Minimizes sum_{i<j} W_ij |r_i - r_j| with each r_i restricted to a convex
polygon. The default weights W_ij = 2 pi_i pi_j / v make the objective the mean
switching time sum_i sum_j pi_i pi_j |r_i - r_j| / v.

Solved by accelerated projected gradient on the smoothed norm
sqrt(|d|^2 + mu^2), halving mu from diameter/10. Optimality is certified by
weak duality: for any unit vectors u_ij = -u_ji,

    f(X) >= sum_i min_{r in C_i} c_i . r,   c_i = sum_j W_ij u_ij,

and the inner minimum of a linear function over a polygon sits at a vertex.
The solver stops once f(X) minus this bound is within tolerance.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numba
import numpy as np

from ..errors import ConvergenceError
from ..geometry import ConvexPolygon

CHUNK = 250
MAX_ITERS = 400_000


class PolygonPack(NamedTuple):
    """Polygons flattened for the numba kernels."""

    verts: np.ndarray  # (total, 2)
    A: np.ndarray  # (total, 2)
    b: np.ndarray  # (total,)
    off: np.ndarray  # (n + 1,)


def pack(polys: Sequence[ConvexPolygon]) -> PolygonPack:
    verts = np.vstack([p.vertices for p in polys])
    A = np.vstack([p.A for p in polys])
    b = np.concatenate([p.b for p in polys])
    off = np.zeros(len(polys) + 1, dtype=np.int64)
    off[1:] = np.cumsum([len(p.vertices) for p in polys])
    return PolygonPack(verts, A, b, off)


@numba.njit(cache=True)
def _project(x, y, verts, A, b, lo, hi):
    inside = True
    for e in range(lo, hi):
        if A[e, 0] * x + A[e, 1] * y > b[e]:
            inside = False
            break
    if inside:
        return x, y
    best = np.inf
    bx = x
    by = y
    for e in range(lo, hi):
        ax = verts[e, 0]
        ay = verts[e, 1]
        nxt = e + 1 if e + 1 < hi else lo
        dx = verts[nxt, 0] - ax
        dy = verts[nxt, 1] - ay
        L2 = dx * dx + dy * dy
        t = 0.0
        if L2 > 0:
            t = ((x - ax) * dx + (y - ay) * dy) / L2
            t = min(max(t, 0.0), 1.0)
        px = ax + t * dx
        py = ay + t * dy
        d = (px - x) ** 2 + (py - y) ** 2
        if d < best:
            best = d
            bx = px
            by = py
    return bx, by


@numba.njit(cache=True)
def _objective(X, W):
    n = X.shape[0]
    f = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if W[i, j] != 0.0:
                f += W[i, j] * np.sqrt((X[i, 0] - X[j, 0]) ** 2 + (X[i, 1] - X[j, 1]) ** 2)
    return f


@numba.njit(cache=True)
def _smoothed(X, W, mu, G):
    n = X.shape[0]
    f = 0.0
    G[:] = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            w = W[i, j]
            if w == 0.0:
                continue
            dx = X[i, 0] - X[j, 0]
            dy = X[i, 1] - X[j, 1]
            s = np.sqrt(dx * dx + dy * dy + mu * mu)
            f += w * s
            gx = w * dx / s
            gy = w * dy / s
            G[i, 0] += gx
            G[i, 1] += gy
            G[j, 0] -= gx
            G[j, 1] -= gy
    return f


@numba.njit(cache=True)
def _fista(X, W, verts, A, b, off, mu, L, iters):
    """Accelerated projected gradient on the smoothed objective, with function-value restart."""
    n = X.shape[0]
    Y = X.copy()
    Xn = X.copy()
    G = np.zeros_like(X)
    t = 1.0
    f_prev = _smoothed(X, W, mu, G)
    for _ in range(iters):
        _smoothed(Y, W, mu, G)
        for i in range(n):
            px, py = _project(Y[i, 0] - G[i, 0] / L, Y[i, 1] - G[i, 1] / L, verts, A, b, off[i], off[i + 1])
            Xn[i, 0] = px
            Xn[i, 1] = py
        f_new = _smoothed(Xn, W, mu, G)
        if f_new > f_prev:
            # restart momentum from the last iterate
            t = 1.0
            Y[:] = X
            continue
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / tn
        for i in range(n):
            Y[i, 0] = Xn[i, 0] + beta * (Xn[i, 0] - X[i, 0])
            Y[i, 1] = Xn[i, 1] + beta * (Xn[i, 1] - X[i, 1])
        X[:] = Xn
        t = tn
        f_prev = f_new
    return X


@numba.njit(cache=True)
def _dual_bound(X, W, verts, off, mu):
    """Weak-duality lower bound using u_ij = d_ij / sqrt(|d_ij|^2 + mu^2)."""
    n = X.shape[0]
    C = np.zeros((n, 2))
    for i in range(n):
        for j in range(i + 1, n):
            w = W[i, j]
            if w == 0.0:
                continue
            dx = X[i, 0] - X[j, 0]
            dy = X[i, 1] - X[j, 1]
            s = np.sqrt(dx * dx + dy * dy + mu * mu)
            if s == 0.0:
                continue
            C[i, 0] += w * dx / s
            C[i, 1] += w * dy / s
            C[j, 0] -= w * dx / s
            C[j, 1] -= w * dy / s
    g = 0.0
    for i in range(n):
        m = np.inf
        for e in range(off[i], off[i + 1]):
            val = C[i, 0] * verts[e, 0] + C[i, 1] * verts[e, 1]
            if val < m:
                m = val
        g += m
    return g


class ConvexSolution(NamedTuple):
    positions: np.ndarray
    objective: float
    bound: float
    iterations: int


def switching_weights(pi, v: float = 1.0) -> np.ndarray:
    """W_ij = 2 pi_i pi_j / v off the diagonal: pairwise form of the mean switching time."""
    pi = np.asarray(pi, dtype=float)
    W = 2.0 * np.outer(pi, pi) / v
    np.fill_diagonal(W, 0.0)
    return W


def pairwise_objective(X, W) -> float:
    return float(_objective(np.ascontiguousarray(X, dtype=float), np.ascontiguousarray(W, dtype=float)))


def lower_bound(X, W, polys_or_pack, mus=(0.0,)) -> float:
    pk = polys_or_pack if isinstance(polys_or_pack, PolygonPack) else pack(polys_or_pack)
    X = np.ascontiguousarray(X, dtype=float)
    W = np.ascontiguousarray(W, dtype=float)
    return max(float(_dual_bound(X, W, pk.verts, pk.off, m)) for m in mus)


def _diameter(verts: np.ndarray) -> float:
    return float(np.linalg.norm(verts.max(0) - verts.min(0)))


def convex_subproblem(polys: Sequence[ConvexPolygon], W, tol: float, x0=None,
                      max_iters: int = MAX_ITERS, cutoff: float | None = None) -> ConvexSolution:
    """Minimize sum_{i<j} W_ij |r_i - r_j| with r_i in polys[i], certified to within tol.

    ``cutoff``: stop early once the certified lower bound reaches this value
    (branch-and-bound pruning). ``x0`` warm-starts the positions.
    Raises ConvergenceError (with the incumbent) if the gap is not closed
    within ``max_iters`` gradient steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = len(polys)
    W = np.ascontiguousarray(W, dtype=float)
    if W.shape != (n, n):
        raise ValueError("weight matrix does not match the number of polygons")
    if n == 1 or not np.any(W > 0):
        X = np.array([p.centroid for p in polys]) if x0 is None else np.array(
            [geometry_project(p, x) for p, x in zip(polys, x0)])
        f = pairwise_objective(X, W)
        return ConvexSolution(X, f, f, 0)
    pk = pack(polys)
    if x0 is None:
        X = np.array([p.centroid for p in polys])
    else:
        X = np.array([geometry_project(p, x) for p, x in zip(polys, np.asarray(x0, dtype=float))])
    X = np.ascontiguousarray(X)
    wsum = float(W.sum(axis=1).max())
    mu = max(_diameter(pk.verts) / 10.0, tol)
    mu_min = tol / 10.0
    best_X = X.copy()
    best_f = pairwise_objective(X, W)
    best_g = -np.inf
    iters = 0
    chunks_at_mu = 0
    prev_fmu = np.inf
    while True:
        L = 2.0 * wsum / mu
        X = _fista(X, W, pk.verts, pk.A, pk.b, pk.off, mu, L, CHUNK)
        iters += CHUNK
        f = pairwise_objective(X, W)
        if f < best_f:
            best_f, best_X = f, X.copy()
        g = max(float(_dual_bound(X, W, pk.verts, pk.off, mu)), float(_dual_bound(X, W, pk.verts, pk.off, 0.0)))
        best_g = max(best_g, g)
        if best_f - best_g <= tol or (cutoff is not None and best_g >= cutoff):
            if best_f - best_g <= tol:
                best_X, best_f = _snap_clusters(best_X, W, polys, best_g, tol)
            return ConvexSolution(best_X, best_f, best_g, iters)
        # once a chunk barely moves the smoothed value (or after 8 chunks) shrink mu;
        # below tol/10 mu keeps shrinking slowly only to sharpen the dual certificate
        G = np.zeros_like(X)
        fmu = float(_smoothed(X, W, mu, G))
        chunks_at_mu += 1
        if prev_fmu - fmu <= 1e-3 * tol or chunks_at_mu >= 8:
            if mu > mu_min or chunks_at_mu >= 8:
                mu *= 0.5
                chunks_at_mu = 0
                fmu = np.inf
        prev_fmu = fmu
        if iters >= max_iters:
            raise ConvergenceError(
                f"position solve did not certify tol={tol:g} (gap {best_f - best_g:.3g}) in {iters} steps",
                incumbent=ConvexSolution(best_X, best_f, best_g, iters),
            )


def _common_point(polys, p, iters=500):
    """Cyclic projections onto the polygons; a point in all of them, or None."""
    for _ in range(iters):
        for poly in polys:
            p = geometry_project(poly, p)
        if all(np.all(poly.A @ p <= poly.b + 1e-10) for poly in polys):
            return p
    return None


def _snap_clusters(X, W, polys, bound, tol):
    """Merge nearly coincident relay points onto one shared feasible point when that stays within tol.

    Smoothing leaves points that should coincide a hair apart, which would
    give tiny nonzero switching times in place of exact zeros.
    """
    n = len(X)
    radius = 10.0 * tol / max(float(W[W > 0].min()), 1e-300)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(X[i] - X[j]) <= radius:
                parent[find(j)] = find(i)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    Xs = X.copy()
    for members in groups.values():
        if len(members) < 2:
            continue
        p = _common_point([polys[i] for i in members], Xs[members].mean(0))
        if p is None:
            continue
        trial = Xs.copy()
        trial[members] = p
        if pairwise_objective(trial, W) - bound <= tol:
            Xs = trial
    f = pairwise_objective(Xs, W)
    if f <= pairwise_objective(X, W) + tol:
        return Xs, f
    return X, pairwise_objective(X, W)


def geometry_project(poly: ConvexPolygon, x) -> np.ndarray:
    px, py = _project(float(x[0]), float(x[1]), poly.vertices, poly.A, poly.b, 0, len(poly.vertices))
    return np.array([px, py])
