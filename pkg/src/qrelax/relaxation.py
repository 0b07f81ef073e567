"""Relaxation timescales: confidence bounds on the decay factors and empirical measurement.

The decay factor of a competing level m on a path that ends in level j is
``M_mj = exp(sigma w B_t - sigma**2 w**2 t / 2)`` with ``w = E_m - E_j``.
Since ``B_t ~ N(0, t)``, ``P(M_mj < exp(-lam))`` has a closed form in the
standard normal distribution function, and inverting it for a confidence
``p`` gives a lower bound on the time after which level m is suppressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .spectrum import PI2

# Rational approximation of the normal quantile (P. J. Acklam), relative
# error below 1.2e-9 before the refinement step.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671043441768e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

# Default confidence and decay threshold used throughout.
P95 = 0.95
LAMBDA10 = 10.0


@dataclass(frozen=True)
class RelaxQuery:
    alpha: float
    sigma: float
    j: int
    lam: float = LAMBDA10
    p: float = P95

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")


def normal_cdf(x: float) -> float:
    """Standard normal distribution function, ``(1 + erf(x/sqrt 2)) / 2``.

    Evaluated through ``erfc`` so the lower tail keeps its relative precision.
    """
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_ppf(p: float) -> float:
    """Inverse of ``normal_cdf``: rational approximation plus one Halley step."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    e = normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def prob_decay(lam: float, t: float, sigma: float, omega: float) -> float:
    """``P(M_mj < exp(-lam))`` at time ``t``; depends on ``omega`` only through ``|omega|``."""
    if not t > 0:
        raise ValueError("t must be > 0")
    if omega == 0:
        raise ValueError("omega must be nonzero: a level does not decay against itself")
    s = sigma * abs(omega) * math.sqrt(t)
    return normal_cdf(0.5 * s - lam / s)


def time_bound(lam: float, sigma: float, omega: float, p: float = P95, log_prior: float = 0.0) -> float:
    """Smallest ``t`` with ``P(M_mj < exp(-(lam + log_prior))) >= p``.

    ``sqrt(t) = (2q + sqrt(4q**2 + 8 lam')) / (2 sigma |omega|)`` with
    ``q = N^-1(p)`` and ``lam' = lam + log_prior``. ``log_prior`` is the
    ``ln pi_m`` correction used in the small-perturbation regime.
    """
    if omega == 0:
        raise ValueError("omega must be nonzero")
    q = normal_ppf(p)
    disc = 4.0 * q * q + 8.0 * (lam + log_prior)
    if disc < 0:
        raise ValueError(
            f"no real time bound: 4 q^2 + 8 (lam + ln pi) = {disc:.6g} < 0 for p={p}, lam={lam}"
        )
    root = (2.0 * q + math.sqrt(disc)) / (2.0 * sigma * abs(omega))
    return max(root, 0.0) ** 2


def level_gap(alpha: float, m: int, j: int) -> float:
    """``E_m - E_j`` in units of eps for the expanded well."""
    return PI2 * (m * m - j * j) / alpha**2


def tau_r(alpha: float, j: int, sigma: float, lam: float = LAMBDA10) -> float:
    """Order-of-magnitude relaxation time using the next level up, ``m = j + 1``.

    For ``lam = 10`` this is the closed form ``40 alpha**4 / (pi**4 sigma**2 (2j+1)**2)``
    (the constant 40 rounds ``(3.3 + sqrt(3.3**2 + 80))**2 / 4 = 41.2``);
    otherwise the 95% bound against ``m = j + 1``. Zero when ``alpha = 1``.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    if alpha == 1.0:
        return 0.0
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    if lam == LAMBDA10:
        return 40.0 * alpha**4 / (math.pi**4 * sigma**2 * (2 * j + 1) ** 2)
    return time_bound(lam, sigma, level_gap(alpha, j + 1, j), P95)


def tau_r_bound(alpha: float, j: int, sigma: float, lam: float = LAMBDA10, p: float = P95) -> float:
    """Time after which every competitor ``m != j`` has ``P(M_mj < e^-lam) >= p``.

    The bound grows as ``|E_m - E_j|`` shrinks, so it is set by the nearest
    level: ``m = j + 1`` for the ground state, ``m = j - 1`` for ``j >= 2``
    (the gap below is ``2j - 1`` against ``2j + 1`` above).
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    if alpha == 1.0:
        return 0.0
    gaps = [abs(level_gap(alpha, j + 1, j))]
    if j > 1:
        gaps.append(abs(level_gap(alpha, j - 1, j)))
    return time_bound(lam, sigma, min(gaps), p)


def min_viable_eps(lam: float, p: float) -> float:
    """Smallest expansion ``eps`` for which the small-perturbation bound is real."""
    q = normal_ppf(p)
    return 0.75 * math.exp(-(2.0 * lam + q * q) / 4.0)


def tau_r_small(eps_pert: float, sigma: float, lam: float = LAMBDA10, p: float = P95) -> float:
    """Relaxation time into the ground state after a slight expansion ``alpha = 1 + eps``.

    ``(q + sqrt(2 lam + 4 ln(4 eps/3) + q**2))**2 / (sigma**2 w21**2)``
    with ``q = N^-1(p)`` and ``w21 = 3 pi**2 / (1 + eps)**2``.
    """
    if not eps_pert > 0:
        raise ValueError("eps_pert must be > 0")
    q = normal_ppf(p)
    rad = 2.0 * lam + 4.0 * math.log(4.0 * eps_pert / 3.0) + q * q
    if rad < 0:
        if rad > -1e-12:
            rad = 0.0
        else:
            raise ValueError(
                f"relaxation bound is not real for eps={eps_pert:g}; "
                f"need eps >= {min_viable_eps(lam, p):.6g} at lam={lam}, p={p}"
            )
    omega21 = 3.0 * PI2 / (1.0 + eps_pert) ** 2
    return (q + math.sqrt(rad)) ** 2 / (sigma**2 * omega21**2)


@dataclass
class RelaxationStats:
    times: np.ndarray  # inf marks a censored trajectory
    median: float
    p95: float
    fraction_relaxed_by_tau: float
    censored_count: int
    tau: float | None


def first_sustained_entry(t, H, E_j: float, tol: float) -> float:
    """First grid time after which ``|H - E_j| < tol`` for the rest of the path; inf if never."""
    bad = np.flatnonzero(np.abs(np.asarray(H) - E_j) >= tol)
    if bad.size == 0:
        return float(t[0])
    k = bad[-1] + 1
    return float(t[k]) if k < len(t) else math.inf


def empirical_relaxation_time(trajectories: Iterable, tol_energy: float = 1e-3, tau: float | None = None) -> RelaxationStats:
    """Scan conditioned trajectories for their sustained relaxation time.

    Each item needs ``t``, ``H_path`` and ``E_j`` attributes (``FilteredTrajectory``
    qualifies). Paths that never settle are kept as censored (``inf``).
    """
    times = np.array([first_sustained_entry(tr.t, tr.H_path, tr.E_j, tol_energy) for tr in trajectories])
    if times.size == 0:
        raise ValueError("no trajectories")
    censored = int(np.sum(~np.isfinite(times)))
    median = float(np.quantile(times, 0.5, method="inverted_cdf"))
    p95 = float(np.quantile(times, 0.95, method="inverted_cdf"))
    frac = float(np.mean(times <= tau)) if tau is not None else math.nan
    return RelaxationStats(times, median, p95, frac, censored, tau)
