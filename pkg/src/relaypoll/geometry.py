"""Relay-region polygons: alpha shape, RDP smoothing and convex decomposition."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import ConvexHull, Delaunay, QhullError
from shapely.geometry import MultiPolygon as ShpMultiPolygon
from shapely.geometry import Polygon as ShpPolygon

from .errors import GeometryError

log = logging.getLogger(__name__)

CONVEX_TOL = 1e-9
RDP_RETRIES = 4


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def _drop_collinear(ring: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Remove repeated and exactly collinear vertices of a closed ring (no repeated closing point)."""
    ring = np.asarray(ring, dtype=float)
    changed = True
    while changed and len(ring) >= 3:
        changed = False
        prev = np.roll(ring, 1, axis=0)
        nxt = np.roll(ring, -1, axis=0)
        scale = np.maximum(np.linalg.norm(nxt - prev, axis=1), 1e-300)
        cr = np.abs(_cross(prev, ring, nxt)) / scale
        dup = np.all(np.isclose(ring, prev, rtol=0, atol=tol), axis=1)
        # collinear and lying between its neighbours
        between = np.einsum("ij,ij->i", ring - prev, nxt - ring) >= 0
        drop = dup | ((cr <= tol) & between)
        if drop.any():
            # drop one per pass from each run so neighbours are re-evaluated
            keep = ~drop
            if not keep.any():
                return ring[:0]
            ring = ring[keep]
            changed = True
    return ring


def _open_ring(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=float)
    if len(c) > 1 and np.allclose(c[0], c[-1]):
        c = c[:-1]
    return c


@dataclass(frozen=True)
class Polygon:
    """Simple polygon with holes: outer ring CCW, holes CW, no repeated closing vertex."""

    outer: np.ndarray
    holes: tuple = ()

    def __post_init__(self):
        outer = _open_ring(self.outer)
        if len(outer) < 3:
            raise GeometryError("outer ring needs at least 3 vertices")
        if _signed_area(outer) < 0:
            outer = outer[::-1]
        holes = []
        for h in self.holes:
            h = _open_ring(h)
            if len(h) < 3:
                raise GeometryError("hole ring needs at least 3 vertices")
            if _signed_area(h) > 0:
                h = h[::-1]
            holes.append(h)
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", tuple(holes))

    @property
    def area(self) -> float:
        return _signed_area(self.outer) + sum(_signed_area(h) for h in self.holes)

    @property
    def rings(self) -> list[np.ndarray]:
        return [self.outer, *self.holes]

    @property
    def n_vertices(self) -> int:
        return sum(len(r) for r in self.rings)

    def to_shapely(self) -> ShpPolygon:
        return ShpPolygon(self.outer, [h for h in self.holes])

    @classmethod
    def from_shapely(cls, poly: ShpPolygon) -> "Polygon":
        return cls(np.asarray(poly.exterior.coords), tuple(np.asarray(r.coords) for r in poly.interiors))

    def is_valid(self) -> bool:
        return bool(self.to_shapely().is_valid)

    def __eq__(self, other):
        return (
            isinstance(other, Polygon)
            and np.array_equal(self.outer, other.outer)
            and len(self.holes) == len(other.holes)
            and all(np.array_equal(a, b) for a, b in zip(self.holes, other.holes))
        )


def _is_convex_ring(v: np.ndarray, tol: float = CONVEX_TOL) -> bool:
    prev = np.roll(v, 1, axis=0)
    nxt = np.roll(v, -1, axis=0)
    scale = max(float(np.ptp(v, axis=0).max()), 1.0) ** 2
    return bool(np.all(_cross(prev, v, nxt) >= -tol * scale)) and _signed_area(v) > 0


@dataclass(frozen=True)
class ConvexPolygon:
    """Convex polygon (CCW vertices) with its halfspace form A x <= b, unit-norm rows."""

    vertices: np.ndarray
    A: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = _drop_collinear(_open_ring(self.vertices))
        if len(v) < 3:
            raise GeometryError("convex polygon needs at least 3 non-collinear vertices")
        if _signed_area(v) < 0:
            v = v[::-1]
        if not _is_convex_ring(v):
            raise GeometryError("polygon is not convex")
        object.__setattr__(self, "vertices", v)
        A, b = _edge_halfspaces(v)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cr = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        a = cr.sum() / 2
        return np.array([((v[:, 0] + w[:, 0]) * cr).sum(), ((v[:, 1] + w[:, 1]) * cr).sum()]) / (6 * a)

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all(pts @ self.A.T <= self.b + tol, axis=1)

    def to_shapely(self) -> ShpPolygon:
        return ShpPolygon(self.vertices)

    def __eq__(self, other):
        return isinstance(other, ConvexPolygon) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())


def _edge_halfspaces(v: np.ndarray):
    d = np.roll(v, -1, axis=0) - v
    A = np.column_stack([d[:, 1], -d[:, 0]])
    norms = np.linalg.norm(A, axis=1)
    A = A / norms[:, None]
    b = np.einsum("ij,ij->i", A, v)
    return A, b


def to_halfspaces(poly) -> tuple[np.ndarray, np.ndarray]:
    """One row per edge, A[k] the outward unit normal of edge k, so interior is A x <= b."""
    if isinstance(poly, ConvexPolygon):
        return poly.A.copy(), poly.b.copy()
    v = _open_ring(poly)
    if not _is_convex_ring(v):
        raise GeometryError("halfspace form requires a convex CCW polygon")
    return _edge_halfspaces(v)


def _segment_closest(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300), 0.0, 1.0)
    return a + t[:, None] * ab


def project_point(poly: ConvexPolygon, point) -> np.ndarray:
    """Euclidean projection of a point onto a convex polygon."""
    p = np.asarray(point, dtype=float)
    if np.all(poly.A @ p <= poly.b):
        return p.copy()
    v = poly.vertices
    w = np.roll(v, -1, axis=0)
    cands = _segment_closest(np.broadcast_to(p, v.shape), v, w)
    k = int(np.argmin(np.linalg.norm(cands - p, axis=1)))
    return cands[k]


# --------------------------------------------------------------------------- alpha shape


def _circumradius(P: np.ndarray) -> np.ndarray:
    a = np.linalg.norm(P[:, 1] - P[:, 2], axis=1)
    b = np.linalg.norm(P[:, 0] - P[:, 2], axis=1)
    c = np.linalg.norm(P[:, 0] - P[:, 1], axis=1)
    area2 = np.abs(_cross(P[:, 0], P[:, 1], P[:, 2]))
    with np.errstate(divide="ignore"):
        return np.where(area2 > 0, a * b * c / (2.0 * np.maximum(area2, 1e-300)), np.inf)


def _polygons_from_geometry(geom, min_hole_area: float = 0.0) -> list[Polygon]:
    if geom.is_empty:
        return []
    parts = list(geom.geoms) if isinstance(geom, ShpMultiPolygon) else [geom]
    out = []
    for p in parts:
        if p.geom_type != "Polygon" or p.area <= 0:
            continue
        outer = _drop_collinear(_open_ring(p.exterior.coords))
        holes = []
        for r in p.interiors:
            if ShpPolygon(r).area < min_hole_area:
                continue
            h = _drop_collinear(_open_ring(r.coords))
            if len(h) >= 3:
                holes.append(h)
        if len(outer) >= 3:
            out.append(Polygon(outer, tuple(holes)))
    # deterministic order: by lowest-left outer vertex
    out.sort(key=lambda q: (float(q.outer[:, 1].min()), float(q.outer[:, 0].min()), -q.area))
    return out


def alpha_shape(points, alpha: float, min_hole_area: float = 0.0) -> list[Polygon]:
    """Alpha shape of a planar point set as a list of polygons (Delaunay circumradius filter).

    Triangles of the Delaunay triangulation with circumradius <= alpha are kept
    and unioned. Points belonging to no kept triangle (isolated points, thin
    spurs) do not contribute area.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(pts) < 3:
        raise GeometryError("alpha shape needs at least 3 distinct points")
    centred = pts - pts.mean(0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise GeometryError("all points are collinear")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise GeometryError(f"triangulation failed: {exc}") from exc
    P = pts[tri.simplices]
    keep = _circumradius(P) <= alpha * (1 + 1e-12)
    if not keep.any():
        return []
    tris = shapely.polygons(P[keep])
    merged = shapely.coverage_union_all(tris)
    return _polygons_from_geometry(merged, min_hole_area)


# --------------------------------------------------------------------------- RDP


def _rdp_chain(pts: np.ndarray, eps: float) -> np.ndarray:
    """Boolean keep-mask of the Ramer-Douglas-Peucker simplification of an open chain."""
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        seg = pts[i + 1 : j]
        a = np.broadcast_to(pts[i], seg.shape)
        b = np.broadcast_to(pts[j], seg.shape)
        d = np.linalg.norm(_segment_closest(seg, a, b) - seg, axis=1)
        k = int(np.argmax(d))
        if d[k] > eps:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return keep


def _farthest_pair(ring: np.ndarray) -> tuple[int, int]:
    try:
        hv = ConvexHull(ring).vertices
    except QhullError:
        hv = np.arange(len(ring))
    H = ring[hv]
    d = np.linalg.norm(H[:, None] - H[None], axis=2)
    a, b = np.unravel_index(np.argmax(d), d.shape)
    a, b = sorted((int(hv[a]), int(hv[b])))
    return a, b


def simplify_ring(ring: np.ndarray, eps: float) -> np.ndarray:
    """RDP on a closed ring: split at two mutually farthest vertices, simplify both chains, rejoin."""
    ring = _open_ring(ring)
    if eps <= 0 or len(ring) < 4:
        return ring.copy()
    a, b = _farthest_pair(ring)
    c1 = ring[a : b + 1]
    c2 = np.vstack([ring[b:], ring[: a + 1]])
    k1 = _rdp_chain(c1, eps)
    k2 = _rdp_chain(c2, eps)
    return np.vstack([c1[k1][:-1], c2[k2][:-1]])


def simplify_rdp(polygon: Polygon, epsilon: float) -> Polygon | None:
    """Simplify each ring independently with tolerance epsilon.

    If the result is not a valid polygon (self-intersection, hole crossing the
    outer ring) epsilon is halved, up to four times, before falling back to
    the unsimplified polygon. Rings reduced below 3 vertices are dropped with a
    warning; if the outer ring collapses, None is returned.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if epsilon == 0:
        return polygon
    eps = epsilon
    for _ in range(RDP_RETRIES + 1):
        outer = _drop_collinear(simplify_ring(polygon.outer, eps))
        if len(outer) < 3 or abs(_signed_area(outer)) == 0:
            warnings.warn(f"RDP with epsilon={eps:g} collapsed an outer ring; polygon dropped", stacklevel=2)
            return None
        holes = []
        for h in polygon.holes:
            hs = _drop_collinear(simplify_ring(h, eps))
            if len(hs) < 3 or abs(_signed_area(hs)) == 0:
                warnings.warn(f"RDP with epsilon={eps:g} collapsed a hole; hole dropped", stacklevel=2)
                continue
            holes.append(hs)
        try:
            cand = Polygon(outer, tuple(holes))
        except GeometryError:
            cand = None
        if cand is not None and cand.is_valid():
            return cand
        eps /= 2
    log.info("RDP could not keep the polygon simple; using the unsimplified rings")
    return polygon


# --------------------------------------------------------------------------- Hertel-Mehlhorn


def _turn(a, b, c) -> float:
    """Signed turning angle at b walking a -> b -> c (positive = left turn)."""
    u = b - a
    w = c - b
    return math.atan2(u[0] * w[1] - u[1] * w[0], u[0] * w[0] + u[1] * w[1])


def _triangulate(polygon: Polygon):
    """Constrained triangulation without Steiner points: (vertex coords, CCW triangles as index triples)."""
    tri_geom = shapely.constrained_delaunay_triangles(polygon.to_shapely())
    coords = []
    index = {}
    tris = []
    for t in tri_geom.geoms:
        c = np.asarray(t.exterior.coords)[:3]
        ids = []
        for p in c:
            key = (round(float(p[0]), 9), round(float(p[1]), 9))
            if key not in index:
                index[key] = len(coords)
                coords.append(p)
            ids.append(index[key])
        if _signed_area(c) < 0:
            ids = ids[::-1]
        if _signed_area(np.asarray([coords[i] for i in ids])) > 0:
            tris.append(ids)
    return np.asarray(coords), tris


def hertel_mehlhorn(polygon: Polygon) -> list[ConvexPolygon]:
    """Convex decomposition: triangulate, then delete inessential diagonals.

    A diagonal is inessential if removing it merges its two pieces into a
    convex piece. Removable diagonals are deleted one at a time, choosing the
    one whose merge leaves the widest remaining angle margin at its endpoints
    (ties broken by vertex indices), until every diagonal is essential.
    """
    if polygon.area <= 1e-14 * max(float(np.ptp(polygon.outer, axis=0).max()), 1.0) ** 2:
        raise GeometryError("degenerate (zero-area) polygon")
    V, tris = _triangulate(polygon)
    if not tris:
        raise GeometryError("triangulation produced no triangles")
    pieces: dict[int, list[int]] = {k: list(t) for k, t in enumerate(tris)}
    edge_owner: dict[tuple[int, int], int] = {}
    for k, t in pieces.items():
        for a, b in zip(t, t[1:] + t[:1]):
            edge_owner[(a, b)] = k
    diagonals = sorted({(min(a, b), max(a, b)) for (a, b) in edge_owner if (b, a) in edge_owner})

    def merge_info(u, v):
        p = edge_owner[(u, v)]
        q = edge_owner[(v, u)]
        P, Q = pieces[p], pieces[q]
        iu, iv = P.index(u), P.index(v)
        ju, jv = Q.index(u), Q.index(v)
        # in P the edge runs u -> v, in Q it runs v -> u
        u_prev = V[P[iu - 1]]
        u_next = V[Q[(ju + 1) % len(Q)]]
        v_prev = V[Q[jv - 1]]
        v_next = V[P[(iv + 1) % len(P)]]
        slack = min(_turn(u_prev, V[u], u_next), _turn(v_prev, V[v], v_next))
        return p, q, slack

    live = set(diagonals)
    while True:
        best = None
        for u, v in sorted(live):
            if (u, v) not in edge_owner:
                u, v = v, u
            p, q, slack = merge_info(u, v)
            if slack < -1e-12:
                continue
            key = (-round(slack, 12), min(u, v), max(u, v))
            if best is None or key < best[0]:
                best = (key, u, v, p, q)
        if best is None:
            break
        _, u, v, p, q = best
        P, Q = pieces[p], pieces[q]
        iv = P.index(v)
        merged = P[iv:] + P[:iv]  # starts at v, ends at u
        ju = Q.index(u)
        rest = Q[ju:] + Q[:ju]  # starts at u, ends at v
        merged = merged + rest[1:-1]
        del pieces[q]
        pieces[p] = merged
        del edge_owner[(u, v)], edge_owner[(v, u)]
        for a, b in zip(merged, merged[1:] + merged[:1]):
            edge_owner[(a, b)] = p
        live.discard((min(u, v), max(u, v)))
    out = [ConvexPolygon(V[ids]) for _, ids in sorted(pieces.items())]
    out.sort(key=lambda c: (float(c.vertices[:, 1].min()), float(c.vertices[:, 0].min()), -c.area))
    return out


def minimal_convex_pieces(polygon: Polygon) -> int:
    """Fewest pieces reachable by deleting diagonals of one triangulation (exhaustive, small inputs only)."""
    V, tris = _triangulate(polygon)
    edge_owner = {}
    for k, t in enumerate(tris):
        for a, b in zip(t, t[1:] + t[:1]):
            edge_owner[(a, b)] = k
    diags = sorted({(min(a, b), max(a, b)) for (a, b) in edge_owner if (b, a) in edge_owner})
    if len(diags) > 16:
        raise ValueError("too many diagonals for exhaustive search")
    best = len(tris)
    for mask in range(1 << len(diags)):
        parent = list(range(len(tris)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for bit, (a, b) in enumerate(diags):
            if mask >> bit & 1:
                parent[find(edge_owner[(a, b)])] = find(edge_owner[(b, a)])
        groups: dict[int, list[int]] = {}
        for k in range(len(tris)):
            groups.setdefault(find(k), []).append(k)
        ok = True
        for g in groups.values():
            geom = shapely.union_all([ShpPolygon(V[tris[k]]) for k in g])
            if geom.geom_type != "Polygon" or abs(geom.convex_hull.area - geom.area) > 1e-9 * max(geom.area, 1.0):
                ok = False
                break
        if ok:
            best = min(best, len(groups))
    return best


# --------------------------------------------------------------------------- region pipeline


@dataclass(frozen=True)
class ConvexPartitionSet:
    polygons: tuple
    source_region_id: str
    bounding_box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    coverage: float = 1.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        polys = tuple(self.polygons)
        if not polys:
            raise GeometryError("a partition set needs at least one polygon")
        object.__setattr__(self, "polygons", polys)

    @property
    def m(self) -> int:
        return len(self.polygons)

    @property
    def area(self) -> float:
        return float(sum(p.area for p in self.polygons))

    @property
    def vertices(self) -> np.ndarray:
        return np.vstack([p.vertices for p in self.polygons])

    def union(self):
        return shapely.union_all([p.to_shapely() for p in self.polygons])

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(pts)
        inside = np.zeros(len(pts), dtype=bool)
        for p in self.polygons:
            inside |= p.contains(pts, tol)
        return inside


def bounding_box(polygons) -> tuple[float, float, float, float]:
    V = np.vstack([p.vertices for p in polygons])
    lo = V.min(0)
    hi = V.max(0)
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def cell_polygons(points, step: float) -> list[Polygon]:
    """Union of axis-aligned cells of side ``step`` centred on the points."""
    pts = np.atleast_2d(points)
    h = step / 2
    boxes = shapely.box(pts[:, 0] - h, pts[:, 1] - h, pts[:, 0] + h, pts[:, 1] + h)
    return _polygons_from_geometry(shapely.coverage_union_all(boxes))


def partition_region(region, alpha: float | None = None, rdp_epsilon: float = 1.0,
                     min_hole_cells: float = 2.0, region_id: str = "region") -> ConvexPartitionSet:
    """Alpha shape -> drop small holes -> RDP -> Hertel-Mehlhorn, plus bounding box and coverage."""
    pts = region.points
    step = region.workspace.grid_step
    if len(pts) == 0:
        raise GeometryError(f"{region_id}: empty region")
    alpha = 1.5 * step if alpha is None else alpha
    min_hole_area = min_hole_cells * step * step
    try:
        shapes = alpha_shape(pts, alpha, min_hole_area)
    except GeometryError:
        shapes = []
    fallback = not shapes
    if fallback:
        # too few or collinear points: fall back to the union of their grid cells
        shapes = [p for p in cell_polygons(pts, step)]
    simplified = []
    for shp in shapes:
        s = simplify_rdp(shp, rdp_epsilon)
        if s is not None:
            simplified.append(s)
    if not simplified:
        simplified = shapes
    polys = []
    for s in simplified:
        polys.extend(hertel_mehlhorn(s))
    cov = float(np.mean(_covered(polys, pts, 1e-9)))
    meta = {
        "alpha_m": alpha,
        "rdp_epsilon_m": rdp_epsilon,
        "alpha_components": len(shapes),
        "cell_fallback": fallback,
        "smoothed_area_m2": float(sum(s.area for s in simplified)),
    }
    return ConvexPartitionSet(tuple(polys), region_id, bounding_box(polys), cov, meta)


def _covered(polys, pts, tol):
    inside = np.zeros(len(pts), dtype=bool)
    for p in polys:
        inside |= p.contains(pts, tol)
    return inside
