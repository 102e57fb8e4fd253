"""Channel-to-noise ratio (CNR) fields, GP prediction and relay-region extraction.

The CNR in dB at location x for a link whose fixed end sits at x_b is modeled as

    path-loss mean   theta_1 - 10 * theta_2 * log10(|x - x_b|)
  + shadowing        zero-mean Gaussian field, covariance alpha2 * exp(-d / beta)
  + multipath        iid zero-mean Gaussian, variance sigma2

``theta_2`` is stored as a nonnegative path-loss exponent so that the mean
decreases with distance. Parameter sets quoted with a negative exponent
(e.g. ``[5.2, -7.5]``) are mapped to the magnitude (7.5) at construction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg, optimize, stats
from scipy.spatial.distance import cdist, pdist

from .errors import DegenerateDesignError, EmptyRegionError, SingularCovarianceError

log = logging.getLogger(__name__)

EXACT_CELL_LIMIT = 4096
MAX_CELLS = 1_000_000
MIN_ESTIMATION_POINTS = 8
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned rectangle sampled on a regular grid (row-major, y rows, x columns)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    grid_step: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.grid_step > 0):
            raise ValueError("workspace needs x_max > x_min, y_max > y_min and grid_step > 0")
        if self.shape[0] < 2 or self.shape[1] < 2:
            raise ValueError(f"workspace grid {self.shape} is smaller than 2x2")

    @property
    def nx(self) -> int:
        return int(np.floor((self.x_max - self.x_min) / self.grid_step + 1e-9)) + 1

    @property
    def ny(self) -> int:
        return int(np.floor((self.y_max - self.y_min) / self.grid_step + 1e-9)) + 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + self.grid_step * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.y_min + self.grid_step * np.arange(self.ny)

    def points(self) -> np.ndarray:
        """All grid points as an (ny*nx, 2) array in row-major order."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def index_of(self, pts) -> np.ndarray:
        """Flat grid index of points lying on grid nodes."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ix = np.rint((pts[:, 0] - self.x_min) / self.grid_step).astype(int)
        iy = np.rint((pts[:, 1] - self.y_min) / self.grid_step).astype(int)
        if np.any((ix < 0) | (ix >= self.nx) | (iy < 0) | (iy >= self.ny)):
            raise ValueError("point outside the workspace grid")
        return iy * self.nx + ix

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return (
            (pts[:, 0] >= self.x_min - tol)
            & (pts[:, 0] <= self.x_max + tol)
            & (pts[:, 1] >= self.y_min - tol)
            & (pts[:, 1] <= self.y_max + tol)
        )


@dataclass(frozen=True)
class ChannelParams:
    theta: tuple[float, float]
    alpha2: float
    beta: float
    sigma2: float

    def __post_init__(self):
        th = tuple(float(t) for t in self.theta)
        if len(th) != 2:
            raise ValueError("theta must have two entries (intercept dB, path-loss exponent)")
        object.__setattr__(self, "theta", (th[0], abs(th[1])))
        if self.alpha2 < 0 or self.beta <= 0 or self.sigma2 < 0:
            raise ValueError("need alpha2 >= 0, beta > 0, sigma2 >= 0")

    def mean(self, pts, base_node, min_distance: float) -> np.ndarray:
        return self.theta[0] - 10.0 * self.theta[1] * log_distance(pts, base_node, min_distance)


def log_distance(pts, base_node, min_distance: float) -> np.ndarray:
    d = np.linalg.norm(np.atleast_2d(pts) - np.asarray(base_node, dtype=float), axis=1)
    return np.log10(np.maximum(d, min_distance))


def design_matrix(pts, base_node, min_distance: float) -> np.ndarray:
    """Rows H_x = [1, -10 log10 |x - x_b|]."""
    ld = log_distance(pts, base_node, min_distance)
    return np.column_stack([np.ones_like(ld), -10.0 * ld])


@dataclass(frozen=True)
class LinkField:
    workspace: Workspace
    base_node: tuple[float, float]
    cnr_db: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "base_node", tuple(float(c) for c in self.base_node))
        if self.cnr_db.shape != self.workspace.shape:
            raise ValueError(f"field shape {self.cnr_db.shape} != workspace {self.workspace.shape}")
        if not np.all(np.isfinite(self.cnr_db)):
            raise ValueError("field contains non-finite values")

    def __eq__(self, other):
        return (
            isinstance(other, LinkField)
            and self.workspace == other.workspace
            and self.base_node == other.base_node
            and np.array_equal(self.cnr_db, other.cnr_db)
        )


@dataclass(frozen=True)
class MeasurementSet:
    locations: np.ndarray
    values_db: np.ndarray
    base_node: tuple[float, float]
    grid_step: float | None = None

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        val = np.asarray(self.values_db, dtype=float).ravel()
        if loc.shape[1] != 2 or loc.shape[0] != val.size:
            raise ValueError("locations must be (m, 2) and match values in length")
        if val.size < 2:
            raise ValueError("a measurement set needs at least 2 measurements")
        if np.unique(loc, axis=0).shape[0] != loc.shape[0]:
            raise ValueError("duplicate measurement locations")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "values_db", val)
        object.__setattr__(self, "base_node", tuple(float(c) for c in self.base_node))

    @property
    def m(self) -> int:
        return self.values_db.size


def _exp_cov(d, alpha2, beta):
    return alpha2 * np.exp(-d / beta)


# --------------------------------------------------------------------------- synthesis


def shadowing_field(workspace: Workspace, alpha2: float, beta: float, rng: np.random.Generator):
    """Zero-mean Gaussian field with covariance alpha2*exp(-d/beta) on the grid.

    Small grids use an exact Cholesky factor of the cell covariance. Larger grids
    use circulant embedding on a doubled torus; negative embedding eigenvalues
    (if any) are clipped and their relative mass is reported.
    Returns (field, info).
    """
    ny, nx = workspace.shape
    if alpha2 == 0:
        return np.zeros((ny, nx)), {"method": "none"}
    h = workspace.grid_step
    if workspace.size <= EXACT_CELL_LIMIT:
        pts = workspace.points()
        C = _exp_cov(cdist(pts, pts), alpha2, beta)
        L = np.linalg.cholesky(C + 1e-12 * alpha2 * np.eye(len(pts)))
        z = L @ rng.standard_normal(len(pts))
        return z.reshape(ny, nx), {"method": "cholesky"}
    my, mx = 2 * ny, 2 * nx
    dy = np.minimum(np.arange(my), my - np.arange(my)) * h
    dx = np.minimum(np.arange(mx), mx - np.arange(mx)) * h
    c = _exp_cov(np.hypot(dy[:, None], dx[None, :]), alpha2, beta)
    lam = np.fft.fft2(c).real
    neg = float(-lam[lam < 0].sum() / np.abs(lam).sum())
    lam = np.clip(lam, 0.0, None)
    z = rng.standard_normal((my, mx)) + 1j * rng.standard_normal((my, mx))
    f = np.fft.fft2(np.sqrt(lam / (my * mx)) * z)
    return f.real[:ny, :nx].copy(), {"method": "circulant", "clipped_mass": neg}


def generate_link_field(workspace: Workspace, base_node, params: ChannelParams, seed,
                        min_distance: float | None = None) -> LinkField:
    """Synthesize one link's CNR field: path-loss mean + shadowing + multipath."""
    if workspace.size > MAX_CELLS:
        raise ValueError(f"grid has {workspace.size} cells, limit is {MAX_CELLS}")
    min_distance = workspace.grid_step if min_distance is None else min_distance
    rng = np.random.default_rng(seed)
    mean = params.mean(workspace.points(), base_node, min_distance).reshape(workspace.shape)
    shadow, info = shadowing_field(workspace, params.alpha2, params.beta, rng)
    multipath = np.sqrt(params.sigma2) * rng.standard_normal(workspace.shape)
    meta = {"shadowing": info, "min_distance_m": min_distance, "seed": repr(seed)}
    return LinkField(workspace, tuple(base_node), mean + shadow + multipath, meta)


def sample_measurements(field: LinkField, fraction: float, seed) -> MeasurementSet:
    """Read the field at round(fraction * cells) distinct uniformly random grid cells."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    ws = field.workspace
    m = int(round(fraction * ws.size))
    if m < 2:
        raise ValueError(f"fraction {fraction} gives only {m} measurements; need at least 2")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(ws.size, size=m, replace=False))
    return MeasurementSet(ws.points()[idx], field.cnr_db.ravel()[idx], field.base_node, ws.grid_step)


# --------------------------------------------------------------------------- estimation


class Variogram(NamedTuple):
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    variance: float


def empirical_variogram(locations, residuals, bin_width: float, max_lag: float) -> Variogram:
    """Binned semivariance 0.5*(r_i - r_j)^2 over pairs; bins centered on multiples of bin_width."""
    d = pdist(locations)
    sq = 0.5 * pdist(residuals[:, None], "sqeuclidean")
    keep = d <= max_lag
    b = np.rint(d[keep] / bin_width).astype(int)
    nb = int(b.max()) + 1 if b.size else 0
    counts = np.bincount(b, minlength=nb).astype(float)
    sums = np.bincount(b, weights=sq[keep], minlength=nb)
    ok = counts > 0
    ok[:1] = False  # bin 0 only holds pairs closer than half a bin
    lags = np.arange(nb) * bin_width
    return Variogram(lags[ok], sums[ok] / counts[ok], counts[ok], float(np.var(residuals)))


def _variogram_model(d, sigma2, alpha2, beta):
    return sigma2 + alpha2 * (1.0 - np.exp(-d / beta))


def estimate_params(measurements: MeasurementSet, min_distance: float | None = None) -> ChannelParams:
    """Estimate theta by least squares, then (alpha2, beta, sigma2) from the residual variogram.

    Residual pairs are binned by distance (bin width = grid step) and the
    semivariogram sigma2 + alpha2*(1 - exp(-d/beta)) is fit by weighted least
    squares with Cressie weights (pair count / gamma^2), so the few short
    lags that pin down the nugget are not swamped by the many long pairs.
    This is the covariogram alpha2*exp(-d/beta) with nugget sigma2, written in
    terms of differences so the fit ignores the mean shift that detrending
    leaves in the residuals.
    """
    locs, y = measurements.locations, measurements.values_db
    if measurements.m < MIN_ESTIMATION_POINTS:
        raise ValueError(f"need at least {MIN_ESTIMATION_POINTS} measurements, got {measurements.m}")
    step = measurements.grid_step or float(pdist(locs).min())
    min_distance = step if min_distance is None else min_distance
    H = design_matrix(locs, measurements.base_node, min_distance)
    ld = H[:, 1]
    if np.ptp(ld) <= 1e-9 * max(1.0, np.abs(ld).max()):
        raise DegenerateDesignError(
            "all measurements are equidistant from the base node; path loss is not identifiable")
    theta, *_ = np.linalg.lstsq(H, y, rcond=None)
    r = y - H @ theta
    dmax = float(pdist(locs).max())
    max_lag = min(dmax / 3.0, 50.0 * step)
    vg = empirical_variogram(locs, r, step, max_lag)
    var0 = vg.variance
    sigma2, a2, beta = var0, 0.0, step
    if vg.lags.size >= 3 and var0 > 0:
        p0 = (0.1 * var0, 0.9 * var0, max(step, max_lag / 10))
        try:
            (sigma2, a2, beta), _ = optimize.curve_fit(
                _variogram_model, vg.lags, vg.gamma, p0=p0,
                sigma=np.maximum(vg.gamma, 1e-9 * var0) / np.sqrt(vg.counts),
                bounds=([0.0, 0.0, 1e-3 * step], [10.0 * var0, 10.0 * var0, 100.0 * max_lag]), maxfev=20000,
            )
        except RuntimeError:
            log.warning("variogram fit failed; treating residuals as pure multipath")
            sigma2, a2, beta = var0, 0.0, step
    a2 = float(max(a2, 0.0))
    sigma2 = float(max(sigma2, 0.0))
    return ChannelParams((float(theta[0]), float(theta[1])), a2, float(beta), float(sigma2))


# --------------------------------------------------------------------------- prediction


@dataclass(frozen=True)
class GpModel:
    """Fitted GP predictor: estimated parameters, measurements and Cholesky factor of Phi."""

    params_hat: ChannelParams
    measurements: MeasurementSet
    phi_factor: tuple
    weights: np.ndarray
    min_distance: float
    jitter: float = 0.0

    @classmethod
    def fit(cls, measurements: MeasurementSet, params: ChannelParams | None = None,
            min_distance: float | None = None) -> "GpModel":
        step = measurements.grid_step or float(pdist(measurements.locations).min())
        min_distance = step if min_distance is None else min_distance
        if params is None:
            params = estimate_params(measurements, min_distance)
        locs = measurements.locations
        Phi = _exp_cov(cdist(locs, locs), params.alpha2, params.beta) + params.sigma2 * np.eye(measurements.m)
        jitter = 0.0
        if params.sigma2 == 0:
            # tiny regularization keeps the factor well defined for the noiseless case
            jitter = 1e-12 * max(params.alpha2, 1.0)
            Phi = Phi + jitter * np.eye(measurements.m)
        ev = np.linalg.eigvalsh(Phi)
        cond = ev[-1] / ev[0] if ev[0] > 0 else np.inf
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularCovarianceError(
                f"Phi is numerically singular (condition number {cond:.3g}, smallest eigenvalue {ev[0]:.3g})",
                condition_number=float(cond), min_eigenvalue=float(ev[0]),
            )
        fac = linalg.cho_factor(Phi, lower=True)
        H = design_matrix(locs, measurements.base_node, min_distance)
        w = linalg.cho_solve(fac, measurements.values_db - H @ np.asarray(params.theta))
        return cls(params, measurements, fac, w, min_distance, jitter)

    @property
    def prior_variance(self) -> float:
        return self.params_hat.alpha2 + self.params_hat.sigma2

    def phi(self) -> np.ndarray:
        locs = self.measurements.locations
        p = self.params_hat
        return _exp_cov(cdist(locs, locs), p.alpha2, p.beta) + (p.sigma2 + self.jitter) * np.eye(self.measurements.m)

    def factor_residual(self) -> float:
        """max |Phi Phi^-1 - I| using the cached factor."""
        Phi = self.phi()
        inv = linalg.cho_solve(self.phi_factor, np.eye(Phi.shape[0]))
        return float(np.abs(Phi @ inv - np.eye(Phi.shape[0])).max())


def predict_points(model: GpModel, pts, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the CNR (dB) at arbitrary points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    p = model.params_hat
    locs = model.measurements.locations
    mean = np.empty(len(pts))
    var = np.empty(len(pts))
    theta = np.asarray(p.theta)
    for s in range(0, len(pts), chunk):
        q = pts[s : s + chunk]
        Psi = _exp_cov(cdist(q, locs), p.alpha2, p.beta)
        H = design_matrix(q, model.measurements.base_node, model.min_distance)
        mean[s : s + chunk] = H @ theta + Psi @ model.weights
        sol = linalg.cho_solve(model.phi_factor, Psi.T)
        var[s : s + chunk] = model.prior_variance - np.einsum("ij,ji->i", Psi, sol)
    np.clip(var, 0.0, model.prior_variance, out=var)
    return mean, var


@dataclass(frozen=True)
class PredictionField:
    workspace: Workspace
    mean_db: np.ndarray
    variance_db2: np.ndarray


def predict(model: GpModel, workspace: Workspace) -> PredictionField:
    """GP prediction over every cell of a workspace grid."""
    mean, var = predict_points(model, workspace.points())
    return PredictionField(workspace, mean.reshape(workspace.shape), var.reshape(workspace.shape))


def connectivity_probability(mean_db, variance_db2, threshold_db: float) -> np.ndarray:
    """P(CNR >= threshold) under a Gaussian prediction; zero variance gives a 0/1 step."""
    mean = np.asarray(mean_db, dtype=float)
    var = np.asarray(variance_db2, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (threshold_db - mean) / sd
    p = stats.norm.sf(z)
    return np.where(var > 0, p, (mean >= threshold_db).astype(float))


def pair_success_probability(p_source_link, p_dest_link) -> np.ndarray:
    a = np.asarray(p_source_link, dtype=float)
    b = np.asarray(p_dest_link, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if np.any((a < 0) | (a > 1) | (b < 0) | (b > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return a * b


@dataclass(frozen=True)
class RelayRegion:
    """Grid cells whose end-to-end success probability clears p_th."""

    workspace: Workspace
    mask: np.ndarray
    p_sd: np.ndarray
    p_th: float

    @property
    def points(self) -> np.ndarray:
        return self.workspace.points()[self.mask.ravel()]

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        return (
            isinstance(other, RelayRegion)
            and self.workspace == other.workspace
            and self.p_th == other.p_th
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.p_sd, other.p_sd)
        )


def extract_relay_region(p_sd, p_th: float, workspace: Workspace, label: str = "pair") -> RelayRegion:
    if not 0 < p_th < 1:
        raise ValueError("p_th must lie in (0, 1)")
    p_sd = np.asarray(p_sd, dtype=float)
    if p_sd.shape != workspace.shape:
        raise ValueError(f"probability grid {p_sd.shape} != workspace {workspace.shape}")
    mask = p_sd >= p_th
    if not mask.any():
        raise EmptyRegionError(f"{label} is unserviceable: no cell reaches p_th = {p_th} (max {p_sd.max():.4f})")
    return RelayRegion(workspace, mask, p_sd, p_th)


def true_connectivity(source_field: LinkField, dest_field: LinkField, threshold_db: float) -> np.ndarray:
    """Cells where both true links clear the CNR threshold."""
    return (source_field.cnr_db >= threshold_db) & (dest_field.cnr_db >= threshold_db)


def conservatism(region: RelayRegion, truly_connected: np.ndarray) -> float:
    """Fraction p_c of predicted-region cells that are truly connected."""
    return float(truly_connected[region.mask].mean())


def predict_pair_region(source_field: LinkField, dest_field: LinkField, threshold_db: float, p_th: float,
                        fraction: float, seed, label: str = "pair"):
    """Sample both links, fit both GPs, and threshold the end-to-end success probability.

    Returns (region, source model, destination model).
    """
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    s_src, s_dst = ss.spawn(2)
    ws = source_field.workspace
    models = []
    probs = []
    for f, s in ((source_field, s_src), (dest_field, s_dst)):
        meas = sample_measurements(f, fraction, s)
        model = GpModel.fit(meas)
        pf = predict(model, ws)
        models.append(model)
        probs.append(connectivity_probability(pf.mean_db, pf.variance_db2, threshold_db))
    p_sd = pair_success_probability(*probs)
    return extract_relay_region(p_sd, p_th, ws, label), models[0], models[1]
