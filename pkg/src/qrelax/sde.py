"""Euler-Maruyama integration of the energy-driven stochastic Schrodinger equation.

In the post-expansion eigenbasis the Hamiltonian is diagonal, so the equation
reduces to independent-looking amplitude updates coupled only through the
energy expectation ``H``::

    da_m = (-i E_m - sigma**2 (E_m - H)**2 / 8) a_m dt + sigma (E_m - H) a_m dW / 2

This route exists to cross-check the filtering solution: driven by the
innovations path extracted from a filtering trajectory, it must reproduce
that trajectory's energy process as ``dt -> 0``.

Functions accept amplitude arrays with leading batch axes so a set of paths
can be stepped together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filtering import StateVector

NORM_TOL = 1e-6


@dataclass
class IntegratorConfig:
    dt: float
    sigma: float = 1.0
    truncation: int = 50
    scheme: str = "euler_maruyama"
    renormalise_each_step: bool = True

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.truncation < 2:
            raise ValueError("truncation must be >= 2")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


@dataclass
class SdeTrajectory:
    """Amplitudes on a uniform grid, one row per time point."""

    t: np.ndarray
    amplitudes: np.ndarray
    energies: np.ndarray
    config: IntegratorConfig

    @property
    def H(self) -> np.ndarray:
        return energy_moments(self.amplitudes, self.energies)[0]

    @property
    def V(self) -> np.ndarray:
        return energy_moments(self.amplitudes, self.energies)[1]

    def states(self):
        for tk, a in zip(self.t, self.amplitudes):
            yield StateVector(a, float(tk))


def energy_moments(amplitudes, energies):
    """Energy mean, variance and third central moment of (possibly unnormalised) states."""
    p = np.abs(np.asarray(amplitudes)) ** 2
    p = p / p.sum(axis=-1, keepdims=True)
    E = np.asarray(energies, dtype=float)
    H = p @ E
    d = E - H[..., None]
    return H, np.sum(p * d**2, axis=-1), np.sum(p * d**3, axis=-1)


def drift_diffusion(state: StateVector | np.ndarray, energies, sigma: float):
    """Drift and noise coefficients of the equation at a normalised state.

    Returns ``(drift, diffusion, H, V)``.
    """
    a = state.amplitudes if isinstance(state, StateVector) else np.asarray(state)
    norm2 = np.sum(np.abs(a) ** 2, axis=-1)
    if np.any(np.abs(norm2 - 1.0) > NORM_TOL):
        raise ValueError(f"state is not normalised (|a|^2 = {norm2})")
    E = np.asarray(energies, dtype=float)
    p = np.abs(a) ** 2
    H = p @ E
    d = E - H[..., None]
    V = np.sum(p * d**2, axis=-1)
    drift = (-1j * E - 0.125 * sigma**2 * d**2) * a
    diffusion = 0.5 * sigma * d * a
    return drift, diffusion, H, V


def _em_update(a: np.ndarray, dW, dt: float, E: np.ndarray, sigma: float, renormalise: bool) -> np.ndarray:
    p = a.real**2 + a.imag**2
    H = (p @ E) / p.sum(axis=-1)
    d = E - H[..., None]
    dW = np.asarray(dW, dtype=float)[..., None]
    a = a + ((-1j * E - 0.125 * sigma**2 * d**2) * dt + 0.5 * sigma * d * dW) * a
    if renormalise:
        a = a / np.sqrt(np.sum(a.real**2 + a.imag**2, axis=-1, keepdims=True))
    return a


def step(state: StateVector, dW: float, energies, config: IntegratorConfig) -> StateVector:
    """One Euler-Maruyama step of length ``config.dt`` with Brownian increment ``dW``."""
    if not math.isfinite(dW):
        raise ValueError("dW must be finite")
    drift_diffusion(state, energies, config.sigma)  # normalisation guard
    a = _em_update(np.asarray(state.amplitudes, dtype=complex), dW, config.dt,
                   np.asarray(energies, dtype=float), config.sigma, config.renormalise_each_step)
    return StateVector(a, state.time_stamp + config.dt)


def brownian_bridge_refine(t, W, fine_t, rng: np.random.Generator) -> np.ndarray:
    """Fill a Brownian path known on ``t`` onto the finer grid ``fine_t``.

    ``t`` must be a subset of ``fine_t``; interior values are drawn from the
    Brownian bridge between neighbouring known values.
    """
    t = np.asarray(t, dtype=float)
    W = np.asarray(W, dtype=float)
    fine_t = np.asarray(fine_t, dtype=float)
    idx = _match(t, fine_t)
    if idx is None:
        raise ValueError("coarse grid is not contained in the fine grid")
    out = np.empty(fine_t.size)
    out[idx] = W
    for k in range(t.size - 1):
        lo, hi = idx[k], idx[k + 1]
        if hi - lo < 2:
            continue
        s = fine_t[lo:hi + 1] - fine_t[lo]
        z = np.concatenate(([0.0], np.cumsum(rng.standard_normal(hi - lo) * np.sqrt(np.diff(s)))))
        frac = s / s[-1]
        out[lo:hi + 1] = W[k] + z - frac * z[-1] + frac * (W[k + 1] - W[k])
    return out


def _match(sub: np.ndarray, grid: np.ndarray, rtol: float = 1e-9) -> np.ndarray | None:
    """Indices of ``sub`` inside ``grid`` (tolerant match) or None."""
    idx = np.clip(np.searchsorted(grid, sub), 0, grid.size - 1)
    left = np.clip(idx - 1, 0, grid.size - 1)
    pick = np.where(np.abs(grid[left] - sub) < np.abs(grid[idx] - sub), left, idx)
    scale = max(float(grid[-1]), 1.0)
    if np.all(np.abs(grid[pick] - sub) <= rtol * scale):
        return pick
    return None


def noise_on_grid(W_t, W_path, dt: float, rng: np.random.Generator | None = None):
    """Return the uniform integration grid and the driving path sampled on it.

    Subsamples when the stored grid is finer, bridges when it is coarser and
    contained in the integration grid; anything else is a grid mismatch.
    """
    W_t = np.asarray(W_t, dtype=float)
    W_path = np.asarray(W_path)
    if W_t[0] != 0.0:
        raise ValueError("noise path must start at t = 0")
    n = int(round(W_t[-1] / dt))
    if n < 1 or abs(n * dt - W_t[-1]) > 1e-9 * max(W_t[-1], 1.0):
        raise ValueError(f"horizon {W_t[-1]} is not a multiple of dt={dt}")
    grid = np.linspace(0.0, W_t[-1], n + 1)
    idx = _match(grid, W_t)
    if idx is not None:
        return grid, W_path[idx]
    if _match(W_t, grid) is not None:
        if rng is None:
            raise ValueError("noise grid is coarser than dt: an rng is needed for bridge refinement")
        if W_path.ndim == 1:
            return grid, brownian_bridge_refine(W_t, W_path, grid, rng)
        cols = [brownian_bridge_refine(W_t, W_path[:, p], grid, rng) for p in range(W_path.shape[1])]
        return grid, np.stack(cols, axis=1)
    raise ValueError(f"noise grid does not nest with dt={dt}")


def integrate_with_noise(psi0, W_t, W_path, energies, config: IntegratorConfig,
                         rng: np.random.Generator | None = None) -> SdeTrajectory:
    """Integrate from ``psi0`` driven by a stored Brownian path ``W_path`` on ``W_t``.

    ``psi0`` may carry a leading batch axis, in which case ``W_path`` has shape
    ``(len(W_t), batch)``.
    """
    a = np.asarray(psi0.amplitudes if isinstance(psi0, StateVector) else psi0, dtype=complex)
    E = np.asarray(energies, dtype=float)
    if a.shape[-1] != E.size:
        raise ValueError("state and energies differ in length")
    drift_diffusion(a, E, config.sigma)  # normalisation guard
    grid, W = noise_on_grid(W_t, W_path, config.dt, rng)
    dW = np.diff(W, axis=0)
    out = np.empty((grid.size,) + a.shape, dtype=complex)
    out[0] = a
    for k in range(grid.size - 1):
        a = _em_update(a, dW[k], config.dt, E, config.sigma, config.renormalise_each_step)
        out[k + 1] = a
    return SdeTrajectory(grid, out, E, config)


@dataclass
class ConvergenceStudy:
    """Max-norm energy errors of Euler-Maruyama against the filtering solution."""

    dts: np.ndarray
    errors: np.ndarray  # (len(dts), paths)
    truncation: int

    @property
    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    @property
    def ratios(self) -> np.ndarray:
        """Mean-error ratio between consecutive step sizes."""
        e = self.mean_errors
        return e[:-1] / e[1:]

    @property
    def orders(self) -> np.ndarray:
        """Observed strong order between consecutive step sizes."""
        return np.log(self.ratios) / np.log(self.dts[:-1] / self.dts[1:])


def strong_convergence_study(
    alpha: float = 2.5,
    n: int = 1,
    truncation: int = 4,
    sigma: float = 1.0,
    T: float = 1.0,
    levels=(10, 12, 14, 16),
    base_level: int = 20,
    paths: int = 10,
    seed: int = 0,
) -> ConvergenceStudy:
    """Drive Euler-Maruyama with innovations extracted from filtering paths.

    Filtering trajectories are generated on a uniform grid of ``2**base_level``
    steps and their innovations paths subsampled to ``dt = T 2**-level``.
    A small truncation keeps the scheme out of its stiff regime: with
    ``N`` levels the early drift scales like ``sigma**2 E_N**2``.
    """
    from .filtering import SdeConfig, simulate_trajectory
    from .spectrum import WellModel, transition_row

    if max(levels) > base_level:
        raise ValueError("integration levels must not be finer than the base grid")
    model = WellModel(alpha=alpha, truncation=truncation)
    E = model.energies()
    row = transition_row(n, alpha, truncation)
    grid = np.linspace(0.0, T, 2**base_level + 1)
    cfg = SdeConfig(sigma=sigma, time_grid=grid, rng_seed=seed)
    W, H = [], []
    for i in range(paths):
        tr = simulate_trajectory(row, cfg, E, index=i)
        W.append(tr.W_path)
        H.append(tr.H_path)
    W = np.stack(W, axis=1)
    H = np.stack(H, axis=1)
    psi0 = np.tile(row.normalised_amplitudes().astype(complex), (paths, 1))
    errors = []
    for lev in levels:
        dt = T / 2**lev
        em = integrate_with_noise(psi0, grid, W, E, IntegratorConfig(dt=dt, sigma=sigma, truncation=truncation))
        errors.append(np.max(np.abs(em.H - H[:: 2 ** (base_level - lev)]), axis=0))
    return ConvergenceStudy(np.array([T / 2**lev for lev in levels]), np.array(errors), truncation)
