"""Closed-form analytics for polling systems with exhaustive service and
stochastic (p_ij = pi_j) routing.

All quantities are in SI units: arrival rates in customers/s, the service time
``zeta`` in s/customer, switching times in s.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InstabilityError

#: Floor applied to visit frequencies of zero-traffic queues.
PI_FLOOR = 1e-4


class Traffic(NamedTuple):
    rho: np.ndarray
    rho_s: float

    @property
    def stable(self) -> bool:
        return self.rho_s < 1.0


@dataclass(frozen=True)
class PollingInstance:
    """Everything the mean-wait formula needs: (lambda, zeta, S, pi).

    With ``geometric=True`` (the default) S must look like travel times between
    points: zero diagonal and the triangle inequality. Abstract instances such
    as the equal-switching-time regime (nonzero diagonal) pass
    ``geometric=False``.
    """

    lam: np.ndarray
    zeta: float
    S: np.ndarray
    pi: np.ndarray
    geometric: bool = True

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "pi", pi)
        n = lam.size
        if n < 1:
            raise ValueError("need at least one queue")
        if S.shape != (n, n) or pi.shape != (n,):
            raise ValueError(f"shape mismatch: lam {lam.shape}, S {S.shape}, pi {pi.shape}")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("arrival rates must be finite and nonnegative")
        if not self.zeta > 0:
            raise ValueError("service time zeta must be positive")
        scale = 1.0 + float(np.abs(S).max())
        if np.any(S < 0) or not np.allclose(S, S.T, rtol=0, atol=1e-9 * scale):
            raise ValueError("switching matrix must be symmetric and nonnegative")
        if self.geometric:
            if np.any(np.abs(np.diag(S)) > 1e-12):
                raise ValueError("geometric switching matrix must have a zero diagonal")
            # s_ik <= s_ij + s_jk for all i, j, k
            viol = S[:, None, :] - (S[:, :, None] + S[None, :, :])
            if viol.max(initial=0.0) > 1e-9 * scale:
                raise ValueError("switching matrix violates the triangle inequality")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("visit frequencies must be positive and sum to 1")
        rho_s = self.zeta * lam.sum()
        if rho_s >= 1.0:
            raise InstabilityError(f"unstable instance: rho_s = {rho_s:.6g} >= 1")

    @property
    def n(self) -> int:
        return self.lam.size

    @property
    def rho(self) -> np.ndarray:
        return self.lam * self.zeta

    @property
    def rho_s(self) -> float:
        return float(self.rho.sum())

    def with_pi(self, pi) -> "PollingInstance":
        return PollingInstance(self.lam, self.zeta, self.S, pi, self.geometric)

    def with_S(self, S) -> "PollingInstance":
        return PollingInstance(self.lam, self.zeta, S, self.pi, self.geometric)


@dataclass(frozen=True)
class ObservedPolicy:
    """Self-loop-free view of a stochastic routing policy."""

    p_tilde: np.ndarray
    pi_tilde: np.ndarray


def traffic(lam, zeta) -> Traffic:
    """Per-queue traffic rho_i = lam_i * zeta and system traffic rho_s."""
    rho = np.atleast_1d(np.asarray(lam, dtype=float)) * float(zeta)
    rho_s = float(rho.sum())
    if rho_s >= 1.0:
        warnings.warn(f"unstable traffic: rho_s = {rho_s:.6g} >= 1", RuntimeWarning, stacklevel=2)
    return Traffic(rho, rho_s)


def service_time(bandwidth_hz: float, spectral_efficiency: float) -> float:
    """Time to send one bit, 1 / (xi * B)."""
    return 1.0 / (spectral_efficiency * bandwidth_hz)


def mean_switching(pi, S) -> float:
    """Average switching time sum_i pi_i sum_j pi_j s_ij."""
    pi = np.asarray(pi, dtype=float)
    return float(pi @ np.asarray(S, dtype=float) @ pi)


def mean_stage(pi, S, rho_s: float) -> float:
    """Average stage duration s_bar / (1 - rho_s)."""
    if rho_s >= 1.0:
        raise InstabilityError(f"mean stage undefined for rho_s = {rho_s:.6g} >= 1")
    return mean_switching(pi, S) / (1.0 - rho_s)


def _tbar(rho, S, pi, form="exact") -> np.ndarray:
    rho_s = float(rho.sum())
    s_bar = float(pi @ S @ pi)
    t_bar = s_bar / (1.0 - rho_s)
    s_in = pi @ S
    # sum_h pi_h sum_{l != k} pi_l s_hl = s_bar - pi_k * s_in_k
    excl = s_bar - pi * s_in
    coef = 1.0 / pi if form == "exact" else (1.0 - pi) / pi
    per_k = (rho_s - rho) * t_bar / pi + coef * excl
    per_i = rho * t_bar / pi + s_in
    return per_k[:, None] + per_i[None, :]


def tbar_matrix(instance: PollingInstance, form: str = "exact") -> np.ndarray:
    """Expected time from a departure at q_i back to the previous departure at q_k.

    Entry ``[k, i]``::

        rho_i t/pi_i + s_in_i + (rho_s - rho_k) t/pi_k + c_k * sum_h pi_h sum_{l!=k} pi_l s_hl

    with t the mean stage duration and s_in_i = sum_h pi_h s_hi. Walking back
    from the departure, the number of intermediate visits to queues other than
    k is geometric with mean (1 - pi_k)/pi_k, and each one is entered by a
    switch whose destination is conditioned on l != k. Hence ``c_k = 1/pi_k``.
    ``form="complement"`` uses ``c_k = (1 - pi_k)/pi_k`` instead; it does not agree
    with simulation and exists for comparison only.

    Diagonal entries are returned by the same expression but are not used by
    :func:`avg_wait`.
    """
    if form not in ("exact", "complement"):
        raise ValueError(f"unknown form {form!r}")
    return _tbar(instance.rho, instance.S, instance.pi, form)


def wait_from_arrays(lam, zeta, S, pi, form: str = "exact") -> float:
    """:func:`avg_wait` on raw arrays, skipping validation (inner loops of optimizers)."""
    rho = lam * zeta
    rho_s = float(rho.sum())
    mg1 = rho_s * zeta / (2.0 * (1.0 - rho_s))
    Spi = S @ pi
    s_bar = float(pi @ Spi)
    if s_bar <= 0.0:
        return mg1
    second = float(pi @ (S * S) @ pi) / (2.0 * s_bar)
    if rho_s <= 0.0:
        return mg1 + second
    T = _tbar(rho, S, pi, form)
    # sum_{k != i} rho_k T_ki
    work = rho @ T - rho * np.diag(T)
    return mg1 + second + float(np.sum(pi * Spi * work)) / (s_bar * rho_s)


def avg_wait(instance: PollingInstance, form: str = "exact") -> float:
    """Stationary mean wait per customer (arrival to start of service).

    M/G/1 term plus the two switching terms of the pseudo-conservation law,
    specialised to p_ij = pi_j.
    """
    if form not in ("exact", "complement"):
        raise ValueError(f"unknown form {form!r}")
    return wait_from_arrays(instance.lam, instance.zeta, instance.S, instance.pi, form)


def mg1_wait(rho_s: float, zeta: float) -> float:
    """Wait time with all switching times zero (M/D/1 with deterministic zeta)."""
    if rho_s >= 1.0:
        raise InstabilityError(f"rho_s = {rho_s:.6g} >= 1")
    return rho_s * zeta / (2.0 * (1.0 - rho_s))


def sqrt_rule(rho) -> np.ndarray:
    """Square-root rule: pi_i proportional to sqrt(rho_i (1 - rho_i)).

    Zero-traffic queues are floored at :data:`PI_FLOOR` and the result is
    renormalised so every queue keeps a positive visit frequency.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if np.any(rho < 0) or np.any(rho >= 1) or rho.sum() >= 1:
        raise ValueError("need 0 <= rho_i < 1 and sum(rho) < 1")
    w = np.sqrt(rho * (1.0 - rho))
    if w.sum() == 0.0:
        warnings.warn("all queues have zero traffic; returning uniform frequencies", RuntimeWarning, stacklevel=2)
        return np.full(rho.size, 1.0 / rho.size)
    pi = w / w.sum()
    if np.any(pi < PI_FLOOR):
        pi = np.maximum(pi, PI_FLOOR)
        pi /= pi.sum()
    return pi


def observed_policy(pi) -> ObservedPolicy:
    """Transition matrix with self-loops removed, and its stationary vector."""
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    n = pi.size
    if n < 2:
        raise ValueError("observed policy needs at least two queues")
    if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise ValueError("pi must lie on the open simplex")
    P = np.tile(pi, (n, 1))
    np.fill_diagonal(P, 0.0)
    P /= P.sum(axis=1, keepdims=True)
    # pi_t^T (P - I) = 0 with sum(pi_t) = 1, solved in least squares form
    M = np.vstack([(P - np.eye(n)).T, np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi_t, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return ObservedPolicy(P, pi_t)


def cyclic_wait(lam, zeta: float, cycle_switching: float) -> float:
    """Mean wait per customer for a fixed cyclic route with exhaustive service.

    Pseudo-conservation law for cyclic exhaustive polling with deterministic
    switching (total switching time per cycle ``cycle_switching``). Because
    every customer needs the same ``zeta``, the rho-weighted mean wait equals
    the per-customer mean.
    """
    rho = np.atleast_1d(np.asarray(lam, dtype=float)) * zeta
    rho_s = float(rho.sum())
    mg1 = mg1_wait(rho_s, zeta)
    s = float(cycle_switching)
    if s < 0:
        raise ValueError("cycle switching time must be nonnegative")
    if s == 0.0:
        return mg1
    if rho_s == 0.0:
        return s / 2.0
    return mg1 + s / 2.0 + s * (rho_s**2 - float(np.sum(rho**2))) / (2.0 * rho_s * (1.0 - rho_s))
