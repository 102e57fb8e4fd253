"""Discrete-event simulation of a relay robot polling n queues.

Customers arrive at each queue as a Poisson process and need ``zeta`` seconds
of service each. The robot serves the queue it is at until it is empty
(exhaustive service, including arrivals during service), then picks the next
queue from its routing policy and travels there for ``S[i, j]`` seconds.
Stochastic routing draws the next queue from ``pi``; a draw of the current
queue is a zero-length stage (the queue is empty) and the robot draws again.
Table routing follows a :class:`~relaypoll.optimizer.table.VisitTable`.
If every switching time is zero and every queue is empty, the robot idles in
place until the next arrival.

The numba kernel only advances the dynamics and logs raw events. Statistics
are computed from the logs afterwards.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numba
import numpy as np
from scipy import stats

from .errors import InstabilityError
from .optimizer.table import VisitTable
from .polling import PollingInstance, mean_stage

TRAVEL, SERVE, IDLE = 0, 1, 2
STATE_NAMES = {TRAVEL: "travel", SERVE: "serve", IDLE: "idle"}
N_BATCHES = 20
# the run continues this fraction of the duration past the horizon so that
# late arrivals in the window get served instead of being dropped
DRAIN_FRACTION = 0.25


@dataclass(frozen=True)
class Motion:
    """Linear motion-power model Gamma_m(v) = kappa1 * v + kappa2 (0 at rest)."""

    kappa1: float = 7.2
    kappa2: float = 0.29
    v: float = 1.0

    def __post_init__(self):
        if self.v <= 0:
            raise ValueError("speed must be positive")

    @property
    def power(self) -> float:
        return self.kappa1 * self.v + self.kappa2 if self.v > 0 else 0.0


@dataclass(frozen=True)
class StochasticRouting:
    pi: tuple[float, ...]

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("routing frequencies must lie on the open simplex")
        object.__setattr__(self, "pi", tuple(float(p) for p in pi))


@dataclass(frozen=True)
class SimConfig:
    lam: tuple[float, ...]
    zeta: float
    S: tuple[tuple[float, ...], ...]
    routing: StochasticRouting | VisitTable
    duration: float
    seed: int = 0
    motion: Motion = field(default_factory=Motion)
    gamma_t: float = 0.1
    warmup: float | None = None
    trace_dt: float | None = None

    def __post_init__(self):
        lam = tuple(float(x) for x in np.atleast_1d(self.lam))
        S = tuple(tuple(float(x) for x in row) for row in np.atleast_2d(self.S))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "S", S)
        if self.warmup is None:
            object.__setattr__(self, "warmup", 0.1 * self.duration)
        if not self.duration > self.warmup >= 0:
            raise ValueError("need duration > warmup >= 0")
        n = len(lam)
        Sa = np.asarray(S)
        if Sa.shape != (n, n) or np.any(Sa < 0) or np.any(np.diag(Sa) != 0):
            raise ValueError("S must be n x n, nonnegative, zero diagonal")
        if self.zeta <= 0 or min(lam) < 0:
            raise ValueError("need zeta > 0 and lam >= 0")
        if self.zeta * sum(lam) >= 1.0:
            raise InstabilityError(f"unstable configuration: rho_s = {self.zeta * sum(lam):.6g} >= 1")
        if isinstance(self.routing, StochasticRouting):
            if len(self.routing.pi) != n:
                raise ValueError("routing frequencies do not match the number of queues")
        elif isinstance(self.routing, VisitTable):
            if self.routing.n > n or set(self.routing.sequence) != set(range(n)):
                raise ValueError("visit table must visit every queue and only existing queues")
        else:
            raise TypeError(f"unsupported routing {type(self.routing).__name__}")

    @classmethod
    def from_instance(cls, instance: PollingInstance, duration: float, routing=None, **kw) -> "SimConfig":
        routing = routing if routing is not None else StochasticRouting(tuple(instance.pi))
        return cls(tuple(instance.lam), instance.zeta, tuple(map(tuple, instance.S)), routing, duration, **kw)

    @property
    def n(self) -> int:
        return len(self.lam)

    @property
    def rho_s(self) -> float:
        return self.zeta * sum(self.lam)

    def with_seed(self, seed: int) -> "SimConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["seed"] = seed
        return SimConfig(**d)

    def key(self) -> str:
        """Fingerprint of everything that shapes the dynamics (not the seed or trace cadence)."""
        d = {f: getattr(self, f) for f in self.__dataclass_fields__ if f not in ("seed", "trace_dt")}
        d["routing"] = repr(self.routing)
        d["motion"] = repr(self.motion)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=repr).encode()).hexdigest()[:16]


@dataclass
class SimMetrics:
    mean_wait: float
    mean_wait_ci: float
    per_queue_wait: np.ndarray
    service_fraction: float
    idle_fraction: float
    mean_power: float
    service_rate: float
    mean_stage: float
    stage_energy: float
    stage_count: int
    moves: int
    departure_gaps: np.ndarray
    departure_gaps_ci: np.ndarray
    customers_arrived: int
    customers_served: int
    final_queue: np.ndarray
    wait_samples: int
    censored: int
    seed: int
    config_key: str
    window: float

    CSV_COLUMNS = (
        "seed", "mean_wait_s", "mean_wait_ci_s", "service_fraction", "idle_fraction",
        "mean_power_w", "service_rate_per_s", "mean_stage_s", "stage_energy_j",
        "stage_count", "moves", "customers_arrived", "customers_served", "wait_samples", "censored",
    )

    def csv_row(self) -> list:
        return [
            self.seed, self.mean_wait, self.mean_wait_ci, self.service_fraction, self.idle_fraction,
            self.mean_power, self.service_rate, self.mean_stage, self.stage_energy,
            self.stage_count, self.moves, self.customers_arrived, self.customers_served, self.wait_samples,
            self.censored,
        ]


@dataclass
class QueueTrace:
    """Queue lengths (waiting plus in service) and robot state sampled on a grid."""

    times: np.ndarray
    lengths: np.ndarray  # (len(times), n)
    state: np.ndarray  # TRAVEL / SERVE / IDLE
    queue: np.ndarray  # queue the robot is at or heading to

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.lengths.shape[1] if self.lengths.ndim == 2 else 0
        w.writerow(["time_s", *[f"q{i + 1}" for i in range(n)], "robot_state", "robot_queue"])
        for t, row, s, q in zip(self.times, self.lengths, self.state, self.queue):
            w.writerow([repr(float(t)), *[int(x) for x in row], int(s), int(q) + 1])
        return buf.getvalue()


# --------------------------------------------------------------------------- kernel


@numba.njit(cache=True)
def _grow(a, size):
    out = np.empty(max(2 * a.size, size), a.dtype)
    out[: a.size] = a
    return out


@numba.njit(cache=True)
def _run_kernel(arr, off, zeta, S, all_zero, mode, cum_pi, table, route_seed, T, start_queue):
    np.random.seed(route_seed)
    n = S.shape[0]
    ptr = off[:-1].copy()
    start = np.full(arr.size, np.nan)
    cap = 1024
    seg_t0 = np.empty(cap)
    seg_t1 = np.empty(cap)
    seg_st = np.empty(cap, np.int8)
    seg_q = np.empty(cap, np.int64)
    nseg = 0
    dcap = 1024
    dep_t = np.empty(dcap)
    dep_q = np.empty(dcap, np.int64)
    ndep = 0
    t = 0.0
    cur = start_queue
    tpos = 0
    moves = 0
    while True:
        # exhaustive service at the current queue
        p = ptr[cur]
        if arr[p] <= t:
            t0 = t
            while arr[p] <= t:
                start[p] = t
                t += zeta
                p += 1
            ptr[cur] = p
            if nseg == seg_t0.size:
                seg_t0 = _grow(seg_t0, nseg + 1)
                seg_t1 = _grow(seg_t1, nseg + 1)
                seg_st = _grow(seg_st, nseg + 1)
                seg_q = _grow(seg_q, nseg + 1)
            seg_t0[nseg] = t0
            seg_t1[nseg] = t
            seg_st[nseg] = 1
            seg_q[nseg] = cur
            nseg += 1
        if ndep == dep_t.size:
            dep_t = _grow(dep_t, ndep + 1)
            dep_q = _grow(dep_q, ndep + 1)
        dep_t[ndep] = t
        dep_q[ndep] = cur
        ndep += 1
        if t >= T:
            break
        if all_zero:
            nxt = np.inf
            for q in range(n):
                if arr[ptr[q]] < nxt:
                    nxt = arr[ptr[q]]
            if nxt > t:
                t1 = min(nxt, T)
                if nseg == seg_t0.size:
                    seg_t0 = _grow(seg_t0, nseg + 1)
                    seg_t1 = _grow(seg_t1, nseg + 1)
                    seg_st = _grow(seg_st, nseg + 1)
                    seg_q = _grow(seg_q, nseg + 1)
                seg_t0[nseg] = t
                seg_t1[nseg] = t1
                seg_st[nseg] = 2
                seg_q[nseg] = cur
                nseg += 1
                t = t1
                if t >= T:
                    break
        # next queue
        if mode == 0:
            j = np.searchsorted(cum_pi, np.random.random(), side="right")
            if j >= n:
                j = n - 1
            if not all_zero:
                while j == cur and n > 1:
                    # self-loop: zero-length visit to an empty queue
                    if ndep == dep_t.size:
                        dep_t = _grow(dep_t, ndep + 1)
                        dep_q = _grow(dep_q, ndep + 1)
                    dep_t[ndep] = t
                    dep_q[ndep] = cur
                    ndep += 1
                    j = np.searchsorted(cum_pi, np.random.random(), side="right")
                    if j >= n:
                        j = n - 1
        else:
            tpos = (tpos + 1) % table.size
            j = table[tpos]
        s = S[cur, j]
        if s > 0.0:
            if nseg == seg_t0.size:
                seg_t0 = _grow(seg_t0, nseg + 1)
                seg_t1 = _grow(seg_t1, nseg + 1)
                seg_st = _grow(seg_st, nseg + 1)
                seg_q = _grow(seg_q, nseg + 1)
            seg_t0[nseg] = t
            seg_t1[nseg] = t + s
            seg_st[nseg] = 0
            seg_q[nseg] = j
            nseg += 1
            t += s
            moves += 1
        cur = j
    return start, seg_t0[:nseg], seg_t1[:nseg], seg_st[:nseg], seg_q[:nseg], dep_t[:ndep], dep_q[:ndep], moves


# --------------------------------------------------------------------------- helpers


def _arrivals(lam, T, rng):
    """Per-queue Poisson arrival times on [0, T], each terminated by +inf."""
    chunks = []
    for rate in lam:
        if rate <= 0:
            chunks.append(np.array([np.inf]))
            continue
        k = rng.poisson(rate * T)
        a = np.sort(rng.uniform(0.0, T, size=k))
        chunks.append(np.append(a, np.inf))
    off = np.zeros(len(lam) + 1, dtype=np.int64)
    off[1:] = np.cumsum([c.size for c in chunks])
    return np.concatenate(chunks), off


def _overlap(t0, t1, lo, hi):
    return np.clip(np.minimum(t1, hi) - np.maximum(t0, lo), 0.0, None)


def _ci_halfwidth(samples, level=0.95):
    samples = np.asarray(samples, dtype=float)
    samples = samples[np.isfinite(samples)]
    k = samples.size
    if k < 2:
        return np.nan
    return float(stats.t.ppf(0.5 + level / 2, k - 1) * samples.std(ddof=1) / np.sqrt(k))


def _last_departure_gaps(dep_t, dep_q, n, lo, nb, hi):
    """Mean (and batch-means CI) of time since the previous departure from k, at each departure from i."""
    idx = np.arange(dep_t.size)
    sums = np.zeros((nb, n, n))
    cnts = np.zeros((nb, n, n))
    in_win = dep_t > lo
    batch = np.minimum(((dep_t - lo) / (hi - lo) * nb).astype(int), nb - 1)
    for k in range(n):
        idx_k = idx[dep_q == k]
        if idx_k.size == 0:
            continue
        pos = np.searchsorted(idx_k, idx, side="left") - 1
        ok = (pos >= 0) & in_win & (dep_q != k)
        gaps = dep_t[ok] - dep_t[idx_k[pos[ok]]]
        np.add.at(sums, (batch[ok], k, dep_q[ok]), gaps)
        np.add.at(cnts, (batch[ok], k, dep_q[ok]), 1.0)
    total = sums.sum(0) / np.maximum(cnts.sum(0), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        bm = sums / cnts
    ci = np.full((n, n), np.nan)
    for k in range(n):
        for i in range(n):
            if k != i:
                ci[k, i] = _ci_halfwidth(bm[:, k, i])
    np.fill_diagonal(total, np.nan)
    return total, ci


# --------------------------------------------------------------------------- public


def run(config: SimConfig) -> tuple[SimMetrics, QueueTrace | None]:
    """Simulate one realisation; returns metrics and (if ``trace_dt`` set) a queue trace.

    Waits are taken over customers arriving in (warmup, duration]; the run
    keeps going for a drain period so those customers are served rather than
    censored (``censored`` counts any still unserved at the end).
    """
    n = config.n
    T = float(config.duration)
    lo = float(config.warmup)
    S = np.asarray(config.S, dtype=float)
    ss = np.random.SeedSequence(config.seed)
    arr_seed, route_seed = ss.spawn(2)
    rng = np.random.default_rng(arr_seed)
    horizon = T * (1.0 + DRAIN_FRACTION)
    arr, off = _arrivals(config.lam, horizon, rng)
    route_int = int(route_seed.generate_state(1)[0] % (2**31 - 1))
    if isinstance(config.routing, StochasticRouting):
        mode = 0
        pi = np.asarray(config.routing.pi)
        cum_pi = np.cumsum(pi)
        cum_pi[-1] = 1.0
        table = np.zeros(1, dtype=np.int64)
        start_queue = 0
    else:
        mode = 1
        cum_pi = np.ones(n)
        table = np.asarray(config.routing.sequence, dtype=np.int64)
        start_queue = int(table[0])
    all_zero = bool(not np.any(S > 0))
    start, s0, s1, sst, sq, dep_t, dep_q, moves = _run_kernel(
        arr, off, float(config.zeta), S, all_zero, mode, cum_pi, table, route_int, horizon, start_queue
    )

    window = T - lo
    zeta = float(config.zeta)
    nb = N_BATCHES
    waits_sum = np.zeros(nb)
    waits_cnt = np.zeros(nb)
    per_queue = np.full(n, np.nan)
    arrived = served = censored = 0
    final_queue = np.zeros(n, dtype=int)
    served_in_window = 0
    for q in range(n):
        a = arr[off[q] : off[q + 1] - 1]
        st = start[off[q] : off[q + 1] - 1]
        keep = a <= T
        a, st = a[keep], st[keep]
        done = np.isfinite(st) & (st + zeta <= T)
        arrived += a.size
        served += int(done.sum())
        final_queue[q] = a.size - int(done.sum())
        comp = st[done] + zeta
        served_in_window += int(np.count_nonzero(comp > lo))
        sel = (a > lo) & np.isfinite(st)
        censored += int(np.count_nonzero((a > lo) & ~np.isfinite(st)))
        w = st[sel] - a[sel]
        if w.size:
            per_queue[q] = w.mean()
        b = np.minimum(((a[sel] - lo) / window * nb).astype(int), nb - 1)
        np.add.at(waits_sum, b, w)
        np.add.at(waits_cnt, b, 1.0)
    n_w = int(waits_cnt.sum())
    mean_wait = float(waits_sum.sum() / n_w) if n_w else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        bmeans = np.where(waits_cnt > 0, waits_sum / np.maximum(waits_cnt, 1), np.nan)
    wait_ci = _ci_halfwidth(bmeans) if n_w else 0.0

    ov = _overlap(s0, s1, lo, T)
    serve_t = float(ov[sst == SERVE].sum())
    travel_t = float(ov[sst == TRAVEL].sum())
    idle_t = float(ov[sst == IDLE].sum())
    energy = config.motion.power * travel_t + config.gamma_t * serve_t
    in_win = (dep_t > lo) & (dep_t <= T)
    stages = int(in_win.sum())
    if stages > 1:
        dw = dep_t[in_win]
        mean_st = float((dw[-1] - dw[0]) / (stages - 1))
    else:
        mean_st = np.nan
    gaps, gaps_ci = _last_departure_gaps(dep_t, dep_q, n, lo, nb, T)

    metrics = SimMetrics(
        mean_wait=mean_wait,
        mean_wait_ci=wait_ci,
        per_queue_wait=per_queue,
        service_fraction=serve_t / window,
        idle_fraction=idle_t / window,
        mean_power=energy / window,
        service_rate=served_in_window / window,
        mean_stage=mean_st,
        stage_energy=energy / stages if stages else np.nan,
        stage_count=stages,
        moves=int(moves),
        departure_gaps=gaps,
        departure_gaps_ci=gaps_ci,
        customers_arrived=int(arrived),
        customers_served=int(served),
        final_queue=final_queue,
        wait_samples=n_w,
        censored=censored,
        seed=config.seed,
        config_key=config.key(),
        window=window,
    )
    trace = None
    if config.trace_dt:
        trace = _trace(arr, off, start, zeta, s0, s1, sst, sq, T, float(config.trace_dt), n)
    return metrics, trace


def _trace(arr, off, start, zeta, s0, s1, sst, sq, T, dt, n):
    times = np.arange(0.0, T, dt)
    lengths = np.zeros((times.size, n), dtype=int)
    for q in range(n):
        a = arr[off[q] : off[q + 1] - 1]
        st = start[off[q] : off[q + 1] - 1]
        comp = np.sort(st[np.isfinite(st)] + zeta)
        lengths[:, q] = np.searchsorted(a, times, side="right") - np.searchsorted(comp, times, side="right")
    seg = np.clip(np.searchsorted(s0, times, side="right") - 1, 0, max(s0.size - 1, 0))
    if s0.size:
        state = sst[seg].astype(int)
        queue = sq[seg].astype(int)
        # instants not covered by any segment (before the first one) are idle at the start queue
        gap = times >= s1[seg]
        state[gap] = IDLE
    else:
        state = np.full(times.size, IDLE)
        queue = np.zeros(times.size, dtype=int)
    return QueueTrace(times, lengths, state, queue)


@dataclass
class Summary:
    """Pooled statistics over an ensemble of runs of one configuration."""

    runs: int
    mean_wait: float
    mean_wait_ci: float
    service_fraction: float
    service_fraction_ci: float
    mean_power: float
    mean_power_ci: float
    service_rate: float
    service_rate_ci: float
    mean_stage: float
    mean_stage_ci: float
    stage_energy: float
    stage_energy_ci: float
    stage_count: float
    departure_gaps: np.ndarray
    departure_gaps_ci: np.ndarray
    config_key: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["departure_gaps"] = np.where(np.isfinite(self.departure_gaps), self.departure_gaps, None).tolist()
        d["departure_gaps_ci"] = np.where(np.isfinite(self.departure_gaps_ci), self.departure_gaps_ci, None).tolist()
        return d


def _nanmean0(x):
    finite = np.isfinite(x)
    cnt = finite.sum(0)
    out = np.where(finite, x, 0.0).sum(0) / np.maximum(cnt, 1)
    return np.where(cnt > 0, out, np.nan)


def aggregate(metrics: Sequence[SimMetrics], level: float = 0.95) -> Summary:
    """Pool runs that differ only in seed: means across runs and between-run t intervals."""
    if len(metrics) < 2:
        raise ValueError("aggregate needs at least two runs")
    keys = {m.config_key for m in metrics}
    if len(keys) != 1:
        raise ValueError("cannot aggregate runs of different configurations")

    def pool(attr):
        x = np.array([getattr(m, attr) for m in metrics], dtype=float)
        return float(np.mean(x)), _ci_halfwidth(x, level)

    gaps = np.array([m.departure_gaps for m in metrics])
    n = gaps.shape[1]
    gap_ci = np.full((n, n), np.nan)
    for k in range(n):
        for i in range(n):
            if k != i:
                gap_ci[k, i] = _ci_halfwidth(gaps[:, k, i], level)
    return Summary(
        len(metrics),
        *pool("mean_wait"),
        *pool("service_fraction"),
        *pool("mean_power"),
        *pool("service_rate"),
        *pool("mean_stage"),
        *pool("stage_energy"),
        float(np.mean([m.stage_count for m in metrics])),
        _nanmean0(gaps),
        gap_ci,
        keys.pop(),
    )


def run_ensemble(config: SimConfig, seeds: Sequence[int]) -> tuple[Summary, list[SimMetrics]]:
    runs = [run(config.with_seed(int(s)))[0] for s in seeds]
    return aggregate(runs), runs


def predicted_power(motion: Motion, gamma_t: float, rho_s: float) -> float:
    """Long-run mean power Gamma_m(v)(1 - rho_s) + Gamma_t rho_s."""
    if rho_s >= 1.0:
        raise InstabilityError(f"rho_s = {rho_s:.6g} >= 1")
    return motion.power * (1.0 - rho_s) + gamma_t * rho_s


def predicted_stage_energy(motion: Motion, gamma_t: float, rho_s: float, s_bar: float) -> float:
    """Mean energy per stage: mean stage duration times long-run mean power."""
    if s_bar < 0:
        raise ValueError("s_bar must be nonnegative")
    t_bar = s_bar / (1.0 - rho_s) if rho_s < 1.0 else np.inf
    if rho_s >= 1.0:
        raise InstabilityError(f"rho_s = {rho_s:.6g} >= 1")
    return t_bar * predicted_power(motion, gamma_t, rho_s)


def metrics_csv(metrics: Sequence[SimMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SimMetrics.CSV_COLUMNS)
    for m in metrics:
        w.writerow([repr(x) if isinstance(x, float) else x for x in m.csv_row()])
    return buf.getvalue()


__all__ = [
    "Motion", "StochasticRouting", "SimConfig", "SimMetrics", "QueueTrace", "Summary",
    "run", "aggregate", "run_ensemble", "predicted_power", "predicted_stage_energy", "metrics_csv",
    "mean_stage",
]
