"""Exact solution of the energy-driven stochastic Schrodinger dynamics by nonlinear filtering.

The terminal energy ``H`` is drawn from the transition row. The observer sees
the information process ``xi_t = sigma H t + B_t``; the energy process is the
conditional expectation of ``H`` given ``xi_t`` and the wave function is the
square root of the Bayes posterior with Schrodinger phases attached. Given
exact Brownian values on a grid these formulas are exact at the grid points.

Every ratio of exponential sums is evaluated with the largest exponent
subtracted first. The exponents grow like ``sigma**2 E_N**2 t`` and overflow
double precision within a few time units at N = 50.

Eigenstate indices ``j`` in this module are 1-based to match the physics
convention; arrays over levels are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .spectrum import TransitionRow, WellModel, eigenfunction_value
from .streams import trajectory_rng


@dataclass
class SdeConfig:
    """Volatility, observation grid, seed and outcome mode for filtering runs.

    ``outcome=None`` samples the terminal level from the transition row;
    an integer forces conditioning on that level (even if its probability is 0).
    """

    sigma: float = 1.0
    time_grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 101))
    rng_seed: int = 0
    outcome: int | None = None

    def __post_init__(self) -> None:
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        validate_grid(self.time_grid)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.outcome is not None and self.outcome < 1:
            raise ValueError(f"forced outcome must be >= 1, got {self.outcome}")


def validate_grid(t: np.ndarray) -> None:
    if t.ndim != 1 or t.size == 0:
        raise ValueError("time grid must be a non-empty 1-d sequence")
    if t[0] != 0.0:
        raise ValueError(f"time grid must start at exactly 0, got {t[0]}")
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")


@dataclass
class StateVector:
    """Complex amplitudes over the truncated post-expansion eigenbasis."""

    amplitudes: np.ndarray
    time_stamp: float = 0.0

    @property
    def norm2(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


@dataclass
class DensitySnapshot:
    x_grid: np.ndarray
    values: np.ndarray
    time_stamp: float = 0.0

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.x_grid))


@dataclass
class FilteredTrajectory:
    """One realisation of the filtering solution on ``config.time_grid``."""

    config: SdeConfig
    outcome_j: int
    priors: np.ndarray
    energies: np.ndarray
    B_path: np.ndarray
    xi_path: np.ndarray
    posterior: np.ndarray
    H_path: np.ndarray
    V_path: np.ndarray
    W_path: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.config.time_grid

    @property
    def E_j(self) -> float:
        return float(self.energies[self.outcome_j - 1])


def _log_priors(priors: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(priors, dtype=float))


def _normalise_log(logw: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    top = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("posterior has no positive prior weight")
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def sample_outcome(row: TransitionRow | np.ndarray, rng: np.random.Generator) -> int:
    """Draw a terminal level ``j`` (1-based) with probability ``pi_j / sum(pi)``."""
    p = row.probs if isinstance(row, TransitionRow) else np.asarray(row, dtype=float)
    total = p.sum()
    if not total > 0:
        raise ValueError("transition row has no positive entry")
    return int(rng.choice(p.size, p=p / total)) + 1


def sample_brownian(time_grid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact Brownian values on the grid, ``B(0) = 0``."""
    t = np.asarray(time_grid, dtype=float)
    validate_grid(t)
    steps = rng.standard_normal(t.size - 1) * np.sqrt(np.diff(t))
    return np.concatenate(([0.0], np.cumsum(steps)))


def information_process(E_j: float, sigma: float, B_path, time_grid) -> np.ndarray:
    return sigma * E_j * np.asarray(time_grid, dtype=float) + np.asarray(B_path, dtype=float)


def posterior(xi, t, sigma: float, priors, energies) -> np.ndarray:
    """Bayes posterior ``P(H = E_m | xi_t)``.

    ``xi`` and ``t`` broadcast together; the level axis is appended last.
    """
    xi = np.asarray(xi, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)[..., None]
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    E = np.asarray(energies, dtype=float)
    logw = _log_priors(priors) + sigma * E * xi - 0.5 * sigma**2 * E**2 * t
    return _normalise_log(logw)


def conditioned_posterior(j: int, B, t, sigma: float, priors, energies) -> np.ndarray:
    """Posterior along a path conditioned on ``H = E_j``, written with ``M_mj``.

    Uses ``log pi_m + sigma w_mj B - sigma**2 w_mj**2 t / 2`` with
    ``w_mj = E_m - E_j``; identical to ``posterior`` at ``xi = sigma E_j t + B``
    but free of the large common exponent.
    """
    E = np.asarray(energies, dtype=float)
    omega = E - E[j - 1]
    B = np.asarray(B, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)[..., None]
    logw = _log_priors(priors) + sigma * omega * B - 0.5 * sigma**2 * omega**2 * t
    return _normalise_log(logw)


def log_decay_factors(j: int, B, t, sigma: float, energies) -> np.ndarray:
    """``log M_mj = sigma w_mj B - sigma**2 w_mj**2 t / 2`` for every level m."""
    E = np.asarray(energies, dtype=float)
    omega = E - E[j - 1]
    B = np.asarray(B, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)[..., None]
    return sigma * omega * B - 0.5 * sigma**2 * omega**2 * t


def energy_expectation(post, energies) -> np.ndarray:
    return np.asarray(post) @ np.asarray(energies, dtype=float)


def energy_variance(post, energies) -> np.ndarray:
    post = np.asarray(post)
    E = np.asarray(energies, dtype=float)
    H = post @ E
    return np.sum(post * (E - np.asarray(H)[..., None]) ** 2, axis=-1)


def conditional_energy_path(j: int, B_path, time_grid, sigma: float, priors, energies) -> np.ndarray:
    """``H^j_t``: energy expectation along a path that ends in level ``j``.

    When ``pi_j = 0`` the path relaxes to the level nearest ``E_j`` instead.
    """
    return energy_expectation(conditioned_posterior(j, B_path, time_grid, sigma, priors, energies), energies)


def variance_path(j: int, B_path, time_grid, sigma: float, priors, energies) -> np.ndarray:
    """``V^j_t``, the energy variance along the conditioned path."""
    return energy_variance(conditioned_posterior(j, B_path, time_grid, sigma, priors, energies), energies)


def innovations_path(xi_path, H_path, sigma: float, time_grid) -> np.ndarray:
    """``W_t = xi_t - sigma * int_0^t H ds`` with the trapezoid rule on the grid."""
    xi = np.asarray(xi_path, dtype=float)
    H = np.asarray(H_path, dtype=float)
    t = np.asarray(time_grid, dtype=float)
    if not (xi.shape == H.shape == t.shape):
        raise ValueError("xi, H and time grid must have the same length")
    if t.size == 1:
        return np.zeros(1)
    return xi - sigma * cumulative_trapezoid(H, t, initial=0.0)


def wavefunction(xi: float, t: float, sigma: float, amplitudes, energies) -> StateVector:
    """State at time ``t`` given the observed ``xi_t``.

    ``amplitudes`` are the signed initial overlaps (their squares form the
    prior). Each coefficient is ``c_m exp(-i E_m t + sigma E_m xi/2 - sigma**2 E_m**2 t/4)``,
    normalised. Evaluated with half-exponents so it does not share arithmetic
    with ``posterior``.
    """
    c = np.asarray(amplitudes, dtype=float)
    E = np.asarray(energies, dtype=float)
    with np.errstate(divide="ignore"):
        log_mod = np.log(np.abs(c)) + 0.5 * sigma * E * xi - 0.25 * sigma**2 * E**2 * t
    log_mod -= np.max(log_mod)
    mod = np.exp(log_mod)
    mod /= math.sqrt(float(np.sum(mod**2)))
    a = np.sign(c) * mod * np.exp(-1j * E * t)
    return StateVector(a, float(t))


def conditioned_wavefunction(j: int, B_t: float, t: float, sigma: float, amplitudes, energies) -> StateVector:
    """Wave function on the path conditioned on level ``j``: ``xi = sigma E_j t + B``."""
    E = np.asarray(energies, dtype=float)
    return wavefunction(sigma * E[j - 1] * t + B_t, t, sigma, amplitudes, E)


def basis_matrix(x_grid, model: WellModel) -> np.ndarray:
    """``chi_m(x)`` for m = 1..N as an (N, len(x)) array on ``[0, alpha L]``."""
    x = np.asarray(x_grid, dtype=float)
    W = model.post_width
    if np.any(x < 0) or np.any(x > W):
        raise ValueError(f"x grid must lie inside the expanded well [0, {W}]")
    return np.stack([eigenfunction_value(m, x, W) for m in range(1, model.truncation + 1)])


def density(state: StateVector, x_grid, model: WellModel, basis: np.ndarray | None = None) -> DensitySnapshot:
    """Position density ``|sum_m a_m chi_m(x)|**2``.

    Evaluated as the sum of the squared real (cosine) and imaginary (sine)
    parts of the superposition, each a real series in the eigenfunctions.
    """
    x = np.asarray(x_grid, dtype=float)
    chi = basis_matrix(x, model) if basis is None else basis
    a = np.asarray(state.amplitudes)
    if a.shape[-1] != chi.shape[0]:
        raise ValueError("state size does not match the model truncation")
    re = a.real @ chi
    im = a.imag @ chi
    return DensitySnapshot(x, re**2 + im**2, state.time_stamp)


def simulate_trajectory(
    row: TransitionRow,
    config: SdeConfig,
    energies: np.ndarray,
    index: int = 0,
) -> FilteredTrajectory:
    """Build one filtering trajectory from its own ``(seed, index)`` stream."""
    rng = trajectory_rng(config.rng_seed, index)
    priors = row.normalised()
    E = np.asarray(energies, dtype=float)
    if E.size != priors.size:
        raise ValueError("energies and transition row differ in length")
    if config.outcome is None:
        j = sample_outcome(priors, rng)
    else:
        j = config.outcome
        if j > E.size:
            raise ValueError(f"forced outcome {j} exceeds truncation {E.size}")
    t = config.time_grid
    B = sample_brownian(t, rng)
    xi = information_process(E[j - 1], config.sigma, B, t)
    post = conditioned_posterior(j, B, t, config.sigma, priors, E)
    H = energy_expectation(post, E)
    V = energy_variance(post, E)
    W = innovations_path(xi, H, config.sigma, t)
    return FilteredTrajectory(config, j, priors, E, B, xi, post, H, V, W)


def ou_reconstruction(t, B, V, H0: float, E_j: float, sigma: float, beta=None, mu4=None) -> np.ndarray:
    """Rebuild ``H^j`` from its mean-reverting representation on the stored grid.

    ``H_t = E_j + (H_0 - E_j) exp(-sigma**2 int_0^t V) + sigma int_0^t exp(-sigma**2 int_u^t V) V_u dB_u``.
    The ``ds`` integral uses the trapezoid rule. The ``dB`` integral is an
    Ito sum: left-point values, refined by the Ito-Taylor terms that depend
    only on the increments when the higher central moments of the posterior
    are supplied. ``V`` diffuses with coefficient ``sigma beta`` and ``beta``
    with ``sigma (mu4 - 3 V**2)``, giving per step

        V dB + sigma beta (dB**2 - dt) / 2 + sigma**2 (mu4 - 3 V**2) (dB**3 - 3 dt dB) / 6.

    A trapezoid rule in ``dB`` would converge to the Stratonovich integral instead.
    """
    t = np.asarray(t, dtype=float)
    B = np.asarray(B, dtype=float)
    V = np.asarray(V, dtype=float)
    if mu4 is not None and beta is None:
        raise ValueError("the fourth-moment term needs beta as well")
    A = cumulative_trapezoid(V, t, initial=0.0)
    dB = np.diff(B)
    dt = np.diff(t)
    inc = V[:-1] * dB
    if beta is not None:
        inc = inc + sigma * np.asarray(beta, dtype=float)[:-1] * 0.5 * (dB**2 - dt)
    if mu4 is not None:
        inc = inc + sigma**2 * (np.asarray(mu4, dtype=float)[:-1] - 3.0 * V[:-1] ** 2) * (dB**3 - 3.0 * dt * dB) / 6.0
    # int_0^t exp(sigma^2 A_u) V_u dB_u times exp(-sigma^2 A_t), carried
    # forward step by step so the exponent stays bounded
    decay = np.exp(-(sigma**2) * np.diff(A))
    transient = np.exp(-(sigma**2) * A)
    out = np.empty_like(t)
    out[0] = H0
    acc = 0.0
    for k in range(1, t.size):
        acc = (acc + inc[k - 1]) * decay[k - 1]
        out[k] = E_j + (H0 - E_j) * transient[k] + sigma * acc
    return out


def central_moment(post, energies, order: int) -> np.ndarray:
    """Central moment of the energy under the posterior (order 3 and 4 feed the reconstruction)."""
    post = np.asarray(post)
    E = np.asarray(energies, dtype=float)
    H = post @ E
    return np.sum(post * (E - np.asarray(H)[..., None]) ** order, axis=-1)


def reconstruction_grid(T: float, K: int, t_min: float = 1e-9) -> np.ndarray:
    """``0`` followed by ``K`` geometric points from ``t_min`` to ``T``.

    The variance starts large and collapses fast, so the early period needs
    far finer steps than late times.
    """
    if not T > t_min:
        raise ValueError("T must exceed t_min")
    return np.concatenate(([0.0], np.geomspace(t_min, T, K)))


def refine_midpoints(t, B, rng: np.random.Generator):
    """Insert the midpoint of every interval, filling B with Brownian-bridge draws."""
    t = np.asarray(t, dtype=float)
    B = np.asarray(B, dtype=float)
    mid = 0.5 * (t[:-1] + t[1:])
    h = np.diff(t)
    Bm = 0.5 * (B[:-1] + B[1:]) + rng.standard_normal(h.size) * np.sqrt(h / 4.0)
    tt = np.empty(2 * t.size - 1)
    bb = np.empty_like(tt)
    tt[0::2], tt[1::2] = t, mid
    bb[0::2], bb[1::2] = B, Bm
    return tt, bb
