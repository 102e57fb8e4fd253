"""Visit frequencies minimizing the analytic mean wait for fixed switching times."""
from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy import optimize

from ..errors import InstabilityError
from ..polling import PI_FLOOR, wait_from_arrays

log = logging.getLogger(__name__)

FD_STEP = 1e-6


def _grad(f, x, h=FD_STEP):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def kkt_residual(grad, pi, floor: float = PI_FLOOR) -> float:
    """Stationarity residual on {pi >= floor, sum pi = 1}.

    Free coordinates must share one gradient value (the multiplier); those at
    the floor may only have a larger gradient.
    """
    at_floor = pi <= floor * (1 + 1e-6)
    free = ~at_floor
    if not free.any():
        return 0.0
    nu = float(np.mean(grad[free]))
    r_free = np.abs(grad[free] - nu)
    r_floor = np.maximum(nu - grad[at_floor], 0.0)
    return float(max(r_free.max(initial=0.0), r_floor.max(initial=0.0)))


def optimize_frequencies(S, lam, zeta: float, pi_init, tol: float = 1e-6, floor: float = PI_FLOOR,
                         max_restarts: int = 3) -> np.ndarray:
    """Local minimizer of the mean wait over the simplex interior (pi_i >= floor).

    Uses SLSQP with central-difference gradients (step 1e-6) on the wait
    normalised by its value at ``pi_init``. SLSQP is restarted from its own
    output while the KKT residual exceeds 10*tol, up to ``max_restarts`` times.
    The returned frequencies never have a larger wait than ``pi_init``.
    """
    S = np.asarray(S, dtype=float)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    pi0 = np.atleast_1d(np.asarray(pi_init, dtype=float))
    n = lam.size
    if zeta * lam.sum() >= 1:
        raise InstabilityError(f"rho_s = {zeta * lam.sum():.6g} >= 1")
    if np.any(pi0 <= 0) or abs(pi0.sum() - 1) > 1e-9:
        raise ValueError("pi_init must lie on the open simplex")
    if n == 1:
        return np.ones(1)
    pi0 = np.maximum(pi0, floor)
    pi0 /= pi0.sum()
    w0 = wait_from_arrays(lam, zeta, S, pi0)
    scale = w0 if w0 > 0 else 1.0

    def f(p):
        return wait_from_arrays(lam, zeta, S, p) / scale

    best, best_w = pi0.copy(), w0
    x = pi0.copy()
    for attempt in range(max_restarts + 1):
        with warnings.catch_warnings():
            # SLSQP clips its own line-search steps back into the bounds
            warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
            res = optimize.minimize(
                f, x, jac=lambda p: _grad(f, p), method="SLSQP",
                bounds=[(floor, 1.0)] * n,
                constraints=[{"type": "eq", "fun": lambda p: p.sum() - 1.0, "jac": lambda p: np.ones_like(p)}],
                options={"ftol": 1e-14, "maxiter": 500},
            )
        x = np.clip(res.x, floor, 1.0)
        x /= x.sum()
        w = wait_from_arrays(lam, zeta, S, x)
        improvement = best_w - w
        if w < best_w:
            best, best_w = x.copy(), w
        kkt = kkt_residual(_grad(lambda p: wait_from_arrays(lam, zeta, S, p), best), best, floor)
        log.debug("SLSQP pass %d: W=%.12g kkt=%.3g (%s)", attempt, w, kkt, res.message)
        if abs(improvement) < tol and kkt < 10 * tol:
            break
    return best
