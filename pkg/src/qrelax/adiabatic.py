"""Energy-driven reduction under a slowly varying Hamiltonian.

Everything is expressed in the instantaneous eigenbasis of a well whose
width grows as ``L(t) = L0 (1 + v t)``, so ``E_k(t) = pi**2 k**2 / (1 + v t)**2``
in units of the initial characteristic energy. Couplings between
instantaneous eigenstates are dropped (adiabatic approximation): the
occupations ``Pi^k = |a_k|**2`` then obey

    dPi^k = sigma (E_k(t) - H_t) Pi^k dW,    H_t = sum_k E_k(t) Pi^k,

which has no drift, conserves ``sum_k Pi^k`` and leaves every eigenstate
fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .relaxation import tau_r_bound
from .spectrum import PI2, transition_row
from .streams import trajectory_rng


@dataclass(frozen=True)
class TimeDependentWell:
    """Square well of width ``L0 (1 + rate t)``, or ``schedule(t)`` when given.

    Energies are in units of ``hbar**2 / (2 mu L0**2)``. A custom
    ``schedule`` returns the width at time ``t``; its rates are taken by
    central differences.
    """

    L0: float = 1.0
    rate: float = 0.0
    truncation: int = 50
    schedule: Callable[[float], float] | None = None

    def __post_init__(self) -> None:
        if not self.L0 > 0:
            raise ValueError(f"L0 must be > 0, got {self.L0}")
        if self.rate < 0:
            raise ValueError(f"rate v must be >= 0, got {self.rate}")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")

    def width(self, t: float) -> float:
        L = self.schedule(t) if self.schedule is not None else self.L0 * (1.0 + self.rate * t)
        if not L > 0:
            raise ValueError(f"well width must stay positive, got L({t}) = {L}")
        return float(L)

    def check_horizon(self, T: float) -> None:
        if not T >= 0:
            raise ValueError("horizon must be >= 0")
        self.width(0.0)
        self.width(T)


def instantaneous_spectrum(t: float, well: TimeDependentWell) -> np.ndarray:
    """``E_k(t) = pi**2 k**2 (L0 / L(t))**2`` for k = 1..N."""
    if t < 0:
        raise ValueError("t must be >= 0")
    k = np.arange(1, well.truncation + 1, dtype=float)
    return PI2 * k**2 * (well.L0 / well.width(t)) ** 2


def spectrum_rate(t: float, well: TimeDependentWell, dt: float = 1e-4) -> np.ndarray:
    """``dE_k/dt``: analytic for the linear schedule, finite differences (step ``dt/10``) otherwise.

    Central differences in the interior; the second-order one-sided formula
    where ``t - h`` would fall before the start.
    """
    if well.schedule is None:
        return -2.0 * well.rate * instantaneous_spectrum(t, well) / (1.0 + well.rate * t)
    h = dt / 10.0
    f = lambda s: instantaneous_spectrum(s, well)
    if t - h < 0:
        return (-3.0 * f(t) + 4.0 * f(t + h) - f(t + 2.0 * h)) / (2.0 * h)
    return (f(t + h) - f(t - h)) / (2.0 * h)


def _moments(probs, energies):
    p = np.asarray(probs, dtype=float)
    E = np.asarray(energies, dtype=float)
    H = p @ E
    V = np.sum(p * (E - H[..., None]) ** 2, axis=-1)
    return H, V


def pi_step(Pi, dW, dt: float, energies, sigma: float):
    """One Euler-Maruyama step of the occupation process.

    ``Pi`` may carry leading batch axes with ``dW`` broadcasting against
    them. Negative components are clamped to zero and the vector is
    renormalised. Returns ``(Pi_next, clamp_events)``. ``dt`` only enters
    through ``dW``; it is accepted so the call mirrors the other steppers.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    Pi = np.asarray(Pi, dtype=float)
    E = np.asarray(energies, dtype=float)
    s = Pi.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-9):
        raise ValueError(f"Pi must be normalised, sum = {s}")
    H = Pi @ E
    new = Pi + sigma * (E - H[..., None]) * Pi * np.asarray(dW, dtype=float)[..., None]
    neg = new < 0
    clamps = int(neg.sum())
    if clamps:
        new = np.where(neg, 0.0, new)
    new = new / new.sum(axis=-1, keepdims=True)
    return new, clamps


def drifted_energy_increment(probs, E_now, E_next, dt: float, sigma: float, dW: float) -> float:
    """``dH = Hdot dt + sigma V dW`` with ``Hdot = sum_k |a_k|**2 (E_k(t+dt) - E_k(t)) / dt``."""
    p = np.asarray(probs, dtype=float)
    E_now = np.asarray(E_now, dtype=float)
    Hdot = float(p @ (np.asarray(E_next, dtype=float) - E_now)) / dt
    _, V = _moments(p, E_now)
    return Hdot * dt + sigma * float(V) * dW


@dataclass(frozen=True)
class ConditionCheck:
    """Both sides of ``std(dH/dt) / std(H) < sigma**2 V / 2``.

    ``status`` is ``"holds"``, ``"fails"`` or ``"reduced"``; the last means
    ``V = 0``, where reduction is already complete and the ratio is undefined.
    """

    lhs: float
    rhs: float
    status: str

    @property
    def holds(self) -> bool:
        return self.status == "holds"


def supermartingale_condition(probs, energies, energy_rates, sigma: float, v_tol: float = 0.0) -> ConditionCheck:
    """Sufficient condition for ``V_t`` to stay a supermartingale under a moving spectrum.

    ``DeltaH = sqrt(V)`` and ``DeltaHdot`` is the spread of ``dE_k/dt``
    under the same occupations.
    """
    p = np.asarray(probs, dtype=float)
    E = np.asarray(energies, dtype=float)
    Ed = np.asarray(energy_rates, dtype=float)
    H, V = _moments(p, E)
    V = float(V)
    rhs = 0.5 * sigma**2 * V
    if V <= v_tol:
        return ConditionCheck(math.nan, rhs, "reduced")
    Hd = float(p @ Ed)
    spread = math.sqrt(max(float(p @ (Ed - Hd) ** 2), 0.0))
    lhs = spread / math.sqrt(V)
    return ConditionCheck(lhs, rhs, "holds" if lhs < rhs else "fails")


def variance_covariance_drift(probs, energies, energy_rates) -> float:
    """Extra drift of ``V_t`` from the moving spectrum: ``2 (sum p E Edot - H Hdot)``."""
    p = np.asarray(probs, dtype=float)
    E = np.asarray(energies, dtype=float)
    Ed = np.asarray(energy_rates, dtype=float)
    return 2.0 * float(p @ (E * Ed) - (p @ E) * (p @ Ed))


def correlation(probs, energies, energy_rates) -> float:
    """Correlation between the energy and its rate of change under ``probs``; nan if either is sharp."""
    p = np.asarray(probs, dtype=float)
    E = np.asarray(energies, dtype=float)
    Ed = np.asarray(energy_rates, dtype=float)
    dE = E - p @ E
    dR = Ed - p @ Ed
    sE = math.sqrt(float(p @ dE**2))
    sR = math.sqrt(float(p @ dR**2))
    if sE == 0 or sR == 0:
        return math.nan
    return float(p @ (dE * dR)) / (sE * sR)


def threshold_rate(probs, sigma: float = 1.0, t: float = 0.0, L0: float = 1.0,
                   rtol: float = 1e-10, v_max: float = 1e12) -> float:
    """Expansion rate at which the sufficient condition flips, by bisection.

    The condition is evaluated for the given occupations at time ``t`` of the
    linear schedule. For ``t = 0`` the closed form is ``sigma**2 V / 4``.
    """
    p = np.asarray(probs, dtype=float)

    def ok(v):
        w = TimeDependentWell(L0=L0, rate=v, truncation=p.size)
        c = supermartingale_condition(p, instantaneous_spectrum(t, w), spectrum_rate(t, w), sigma)
        if c.status == "reduced":
            raise ValueError("occupations are an eigenstate: no threshold")
        return c.holds

    if not ok(0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    while ok(hi):
        lo, hi = hi, 2.0 * hi
        if hi > v_max:
            return math.inf
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class PiProcess:
    """Occupation paths on a uniform grid; ``values`` has shape (time, paths, N)."""

    t: np.ndarray
    values: np.ndarray
    initial: np.ndarray
    widths: np.ndarray
    H: np.ndarray
    V: np.ndarray
    condition_lhs: np.ndarray
    condition_rhs: np.ndarray
    status: np.ndarray
    clamp_events: int

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def se(self) -> np.ndarray:
        P = self.values.shape[1]
        if P < 2:
            return np.zeros_like(self.mean)
        return self.values.std(axis=1, ddof=1) / math.sqrt(P)


def run_pi_process(well: TimeDependentWell, Pi0, sigma: float, T: float, dt: float,
                   paths: int = 1, seed: int = 0, record_every: int = 1) -> PiProcess:
    """Integrate ``paths`` occupation processes from ``Pi0`` over ``[0, T]``.

    Path ``i`` draws its increments from the ``(seed, i)`` stream. The
    condition columns refer to the first path.
    """
    Pi0 = np.asarray(Pi0, dtype=float)
    if Pi0.shape != (well.truncation,):
        raise ValueError("Pi0 length must equal the well truncation")
    if np.any(Pi0 < 0) or abs(Pi0.sum() - 1.0) > 1e-9:
        raise ValueError("Pi0 must be a probability vector")
    well.check_horizon(T)
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"horizon {T} is not a multiple of dt={dt}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    dW = np.stack([trajectory_rng(seed, i).standard_normal(n) for i in range(paths)], axis=1) * math.sqrt(dt)

    Pi = np.tile(Pi0, (paths, 1))
    rec = list(range(0, n + 1, record_every))
    if rec[-1] != n:
        rec.append(n)
    rec_set = set(rec)
    ts, vals, widths, Hs, Vs, lhs, rhs, status = [], [], [], [], [], [], [], []
    clamps = 0

    def record(k):
        tk = k * dt
        E = instantaneous_spectrum(tk, well)
        c = supermartingale_condition(Pi[0], E, spectrum_rate(tk, well, dt), sigma)
        H, V = _moments(Pi, E)
        ts.append(tk)
        vals.append(Pi.copy())
        widths.append(well.width(tk))
        Hs.append(H)
        Vs.append(V)
        lhs.append(c.lhs)
        rhs.append(c.rhs)
        status.append(c.status)

    record(0)
    for k in range(n):
        Pi, c = pi_step(Pi, dW[k], dt, instantaneous_spectrum(k * dt, well), sigma)
        clamps += c
        if k + 1 in rec_set:
            record(k + 1)
    return PiProcess(np.array(ts), np.array(vals), Pi0, np.array(widths), np.array(Hs), np.array(Vs),
                     np.array(lhs), np.array(rhs), np.array(status), clamps)


def pi_martingale_z(process: PiProcess, atol: float = 1e-12) -> np.ndarray:
    """``(mean Pi^k(t) - Pi^k(0)) / SE`` over recorded times.

    Where the spread is at rounding level (``SE <= atol``, e.g. at ``t = 0``)
    the entry is 0 if the mean also sits within ``atol`` of the start and
    ``inf`` otherwise.
    """
    diff = process.mean - process.initial
    se = process.se
    live = se > atol
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(live, diff / np.where(live, se, 1.0), np.where(np.abs(diff) <= atol, 0.0, np.inf))


# A slow expansion approximated by a staircase of small sudden expansions,
# each followed by a dwell long enough for full reduction. Between steps the
# state is an eigenstate, so each step is a quench with its own transition row
# and the terminal law of the filtering dynamics applies.

@dataclass
class StaircaseResult:
    eps: float
    steps: int
    ratio: float  # width ratio per step
    dwell: float  # time per step, 10 relaxation times of the ground state
    rate: float  # effective v = eps / (steps * dwell)
    ground_probability: float  # exact, from the product of transition matrices
    sampled_probability: float | None = None
    sampled_se: float | None = None


def step_matrix(ratio: float, truncation: int) -> np.ndarray:
    """Row-stochastic matrix of normalised transition rows for one width jump."""
    return np.stack([transition_row(n, ratio, truncation).normalised() for n in range(1, truncation + 1)])


def staircase_expansion(eps: float, steps: int, sigma: float = 1.0, n: int = 1, truncation: int = 12,
                        M: int = 0, seed: int = 0) -> StaircaseResult:
    """Widen the well by ``1 + eps`` in ``steps`` equal ratios and report P(ground state).

    More steps means a slower effective rate ``v``. With ``M > 0`` the
    chain is also sampled path by path as a Monte Carlo check.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    r = (1.0 + eps) ** (1.0 / steps)
    P = step_matrix(r, truncation)
    dist = np.zeros(truncation)
    dist[n - 1] = 1.0
    for _ in range(steps):
        dist = dist @ P
    dwell = 10.0 * tau_r_bound(r, 1, sigma)
    res = StaircaseResult(eps, steps, r, dwell, eps / (steps * dwell), float(dist[0]))
    if M > 0:
        cum = np.cumsum(P, axis=1)
        hits = 0
        for i in range(M):
            rng = trajectory_rng(seed, i)
            k = n - 1
            for u in rng.random(steps):
                k = min(int(np.searchsorted(cum[k], u * cum[k, -1], side="right")), truncation - 1)
            hits += k == 0
        p = hits / M
        res.sampled_probability = p
        res.sampled_se = math.sqrt(max(p * (1 - p), 1e-300) / M)
    return res
