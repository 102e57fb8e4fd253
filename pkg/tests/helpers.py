"""Small builders and independent oracles shared by the test modules."""
import math

import numpy as np
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from relaypoll.channel import ChannelParams, MeasurementSet, RelayRegion, Workspace
from relaypoll.geometry import ConvexPartitionSet, ConvexPolygon, Polygon, bounding_box


def square(cx, cy, h):
    return ConvexPolygon(np.array([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]]))


def single(poly, rid="r"):
    return ConvexPartitionSet((poly,), rid, bounding_box([poly]), 1.0)


def partition_set(polys, rid="r"):
    return ConvexPartitionSet(tuple(polys), rid, bounding_box(polys), 1.0)


def random_geometric_S(rng, n, scale=10.0):
    X = rng.uniform(0, scale, size=(n, 2))
    S = np.linalg.norm(X[:, None] - X[None], axis=2)
    return S



# --------------------------------------------------------------------------- oracles


def winding_number(pt, ring):
    """Winding number of a closed ring around pt (Sunday's crossing rule)."""
    x, y = pt
    wn = 0
    n = len(ring)
    for k in range(n):
        x0, y0 = ring[k]
        x1, y1 = ring[(k + 1) % n]
        side = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)
        if y0 <= y < y1 and side > 0:
            wn += 1
        elif y1 <= y < y0 and side < 0:
            wn -= 1
    return wn


def inside_oracle(pt, poly: Polygon):
    return winding_number(pt, poly.outer) != 0 and all(winding_number(pt, h) == 0 for h in poly.holes)


def dist_to_ring(pts, ring):
    a = ring
    b = np.roll(ring, -1, axis=0)
    ab = b - a
    t = np.einsum("pkd,kd->pk", pts[:, None, :] - a[None], ab) / np.einsum("kd,kd->k", ab, ab)
    t = np.clip(t, 0, 1)
    foot = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(pts[:, None, :] - foot, axis=2).min(axis=1)


def densify(ring, step):
    out = []
    n = len(ring)
    for k in range(n):
        a, b = ring[k], ring[(k + 1) % n]
        m = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        out.append(a + np.linspace(0, 1, m, endpoint=False)[:, None] * (b - a))
    return np.vstack(out)


def hausdorff(r1, r2, step):
    return max(dist_to_ring(densify(r1, step), r2).max(), dist_to_ring(densify(r2, step), r1).max())


def turns_left(v):
    prev = np.roll(v, 1, axis=0)
    nxt = np.roll(v, -1, axis=0)
    return (v[:, 0] - prev[:, 0]) * (nxt[:, 1] - v[:, 1]) - (v[:, 1] - prev[:, 1]) * (nxt[:, 0] - v[:, 0])


DEFAULT_CHANNEL = ChannelParams((5.2, 7.5), 16.0, 2.09, 1.96)


# --------------------------------------------------------------------------- dense oracle


def kriging_oracle(locs, y, base, params, q, min_distance):
    """Mean and variance built entry by entry and solved with np.linalg.solve."""
    m = len(locs)
    a2, beta, s2 = params.alpha2, params.beta, params.sigma2
    th0, th1 = params.theta

    def h(p):
        d = max(math.hypot(p[0] - base[0], p[1] - base[1]), min_distance)
        return np.array([1.0, -10.0 * math.log10(d)])

    Phi = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            d = math.hypot(locs[i][0] - locs[j][0], locs[i][1] - locs[j][1])
            Phi[i, j] = a2 * math.exp(-d / beta) + (s2 if i == j else 0.0)
    psi = np.array([a2 * math.exp(-math.hypot(q[0] - l[0], q[1] - l[1]) / beta) for l in locs])
    Hm = np.array([h(l) for l in locs])
    theta = np.array([th0, th1])
    mean = h(q) @ theta + psi @ np.linalg.solve(Phi, np.asarray(y) - Hm @ theta)
    var = a2 + s2 - psi @ np.linalg.solve(Phi, psi)
    return mean, var


HAND_CASES = [
    # locations, values, base, params, query
    ([(1.0, 2.0), (4.0, 2.5), (2.0, 5.0)], [-60.0, -72.5, -68.0], (0.0, 0.0),
     ChannelParams((5.2, 7.5), 16.0, 2.09, 1.96), (2.5, 3.0)),
    ([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], [-50.0, -51.0, -49.5], (3.0, 3.0),
     ChannelParams((0.0, 2.0), 4.0, 0.5, 0.25), (0.4, 0.4)),
    ([(10.0, 1.0), (11.0, 7.0), (3.0, 3.0)], [-80.0, -82.0, -75.0], (5.0, 5.0),
     ChannelParams((-20.0, 3.5), 9.0, 4.0, 0.0), (7.0, 7.0)),
]


# --------------------------------------------------------------------------- position oracles


def disc(cx, cy, r, k=24):
    t = np.linspace(0, 2 * np.pi, k, endpoint=False)
    return ConvexPolygon(np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)]))


def random_partition(rng, center, m, spread=6.0):
    polys = []
    for _ in range(m):
        c = np.asarray(center) + rng.uniform(-spread, spread, 2)
        pts = c + rng.uniform(-1.0, 1.0, (6, 2))
        polys.append(ConvexPolygon(pts[ConvexHull(pts).vertices]))
    return partition_set(polys)


def pairwise(X, W):
    n = len(X)
    return sum(W[i, j] * np.linalg.norm(X[i] - X[j]) for i in range(n) for j in range(i + 1, n))


def grid_points(poly: ConvexPolygon, h):
    lo, hi = poly.vertices.min(0), poly.vertices.max(0)
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + h / 2, h), np.arange(lo[1], hi[1] + h / 2, h))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return np.vstack([pts[poly.contains(pts)], poly.vertices])


def grid_brute_force(polys, W, h=0.05):
    """Exhaustive search over h-grids inside three polygons, vectorized over the last one."""
    G = [grid_points(p, h) for p in polys]
    best = np.inf
    for a in G[0]:
        d01 = np.linalg.norm(G[1] - a, axis=1)
        d02 = np.linalg.norm(G[2] - a, axis=1)
        d12 = np.linalg.norm(G[1][:, None] - G[2][None], axis=2)
        f = W[0, 1] * d01[:, None] + W[0, 2] * d02[None, :] + W[1, 2] * d12
        best = min(best, float(f.min()))
    return best


# --------------------------------------------------------------------------- hypothesis generators


@st.composite
def star_polygons(draw, with_hole=None):
    """Star-shaped simple polygon around the origin, optionally with a square hole."""
    n = draw(st.integers(3, 24))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    if np.diff(np.r_[ang, ang[0] + 2 * np.pi]).max() > np.pi * 0.95:
        ang = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 0.1)
    r = rng.uniform(3.0, 10.0, n)
    outer = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    hole = draw(st.booleans()) if with_hole is None else with_hole
    holes = (np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]]),) if hole else ()
    poly = Polygon(outer, holes)
    if not poly.is_valid():
        poly = Polygon(outer)
    return poly


@st.composite
def blob_regions(draw):
    """A random union of discs on a 0.5 m grid, as a relay region."""
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    ws = Workspace(0, 20, 0, 20, 0.5)
    P = ws.points()
    mask = np.zeros(ws.size, dtype=bool)
    for _ in range(draw(st.integers(1, 4))):
        c = rng.uniform(4, 16, 2)
        mask |= np.linalg.norm(P - c, axis=1) <= rng.uniform(1.5, 4.0)
    mask = mask.reshape(ws.shape)
    return RelayRegion(ws, mask, mask.astype(float), 0.5)


@st.composite
def gp_case(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    m = draw(st.integers(3, 25))
    cells = rng.choice(40 * 40, size=m, replace=False)
    locs = np.column_stack([cells % 40, cells // 40]) * 0.5
    params = ChannelParams(
        (draw(st.floats(-30, 10)), draw(st.floats(1.5, 5.0))),
        draw(st.floats(0.5, 30.0)),
        draw(st.floats(0.3, 6.0)),
        draw(st.sampled_from([0.0, 0.1, 1.96, 5.0])),
    )
    y = params.mean(locs, (10.0, 10.0), 0.5) + rng.normal(0, 4, m)
    q = rng.uniform(0, 20, (30, 2))
    return MeasurementSet(locs, y, (10.0, 10.0), 0.5), params, q


# --------------------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: dict[int, str] = {}


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line, then fail the calling test if needed."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line
