"""Monte Carlo ensembles of filtering trajectories and the statistics built on them.

Trajectories only need Brownian values at the checkpoint times because the
filtering solution is exact on any grid. Each trajectory draws from its own
``(seed, index)`` stream and results are reduced strictly in index order, so
a summary is bit-identical for any number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy import stats

from .filtering import (
    SdeConfig,
    basis_matrix,
    conditioned_posterior,
    sample_brownian,
    sample_outcome,
)
from .relaxation import tau_r_bound
from .spectrum import TransitionRow, WellModel, transition_row
from .streams import trajectory_rng

N_CHECKPOINTS = 64
X_POINTS = 512


def checkpoint_times(tau: float, count: int = N_CHECKPOINTS) -> np.ndarray:
    """``t = 0`` followed by ``count`` geometric times from ``tau/100`` to ``10 tau``."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return np.concatenate(([0.0], np.geomspace(tau / 100.0, 10.0 * tau, count)))


def default_tau(model: WellModel, sigma: float, outcome: int | None) -> float:
    """Relaxation time that sets the default checkpoint span.

    Sampled mode uses the ground-state bound: the 1-2 gap is the smallest
    in the spectrum, so no level relaxes more slowly.
    """
    if model.alpha == 1.0:
        return 1.0
    return tau_r_bound(model.alpha, outcome or 1, sigma)


class KahanSum:
    """Elementwise compensated accumulator for numpy arrays."""

    def __init__(self, shape) -> None:
        self.total = np.zeros(shape)
        self._c = np.zeros(shape)

    def add(self, x) -> None:
        y = np.asarray(x, dtype=float) - self._c
        s = self.total + y
        self._c = (s - self.total) - y
        self.total = s


@dataclass
class EnsembleSummary:
    run_count: int
    mode: str
    outcome: int | None
    checkpoint_times: np.ndarray
    mean_H: np.ndarray
    se_H: np.ndarray
    mean_V: np.ndarray
    se_V: np.ndarray
    se_dV: np.ndarray  # standard error of the mean V increment between checkpoints
    terminal_counts: np.ndarray
    priors: np.ndarray
    energies: np.ndarray
    initial_energy: float
    x_grid: np.ndarray | None = None
    mean_density: np.ndarray | None = None
    H_paths: np.ndarray | None = None
    V_paths: np.ndarray | None = None
    outcomes: np.ndarray | None = None
    seed: int = 0
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def terminal_frequency(self) -> np.ndarray:
        return self.terminal_counts / self.run_count


@dataclass(frozen=True)
class _Job:
    amplitudes: np.ndarray
    energies: np.ndarray
    sigma: float
    times: np.ndarray
    seed: int
    outcome: int | None
    basis: np.ndarray | None


def _one(job: _Job, index: int):
    rng = trajectory_rng(job.seed, index)
    priors = job.amplitudes**2
    j = sample_outcome(priors, rng) if job.outcome is None else job.outcome
    B = sample_brownian(job.times, rng)
    post = conditioned_posterior(j, B, job.times, job.sigma, priors, job.energies)
    E = job.energies
    H = post @ E
    V = np.sum(post * (E - H[:, None]) ** 2, axis=1)
    rho = None
    if job.basis is not None:
        a = np.sign(job.amplitudes) * np.sqrt(post)
        phase = E[None, :] * job.times[:, None]
        rho = ((a * np.cos(phase)) @ job.basis) ** 2 + ((a * np.sin(phase)) @ job.basis) ** 2
    return j, H, V, rho


def _chunk(args):
    job, indices = args
    return [_one(job, i) for i in indices]


def run_ensemble(
    model: WellModel,
    sigma: float = 1.0,
    M: int = 1000,
    outcome: int | None = None,
    seed: int = 0,
    n: int = 1,
    row: TransitionRow | None = None,
    times: np.ndarray | None = None,
    density: bool = False,
    x_points: int = X_POINTS,
    keep_paths: bool = False,
    threads: int = 1,
) -> EnsembleSummary:
    """Run ``M`` filtering trajectories and aggregate them at checkpoint times.

    ``outcome=None`` samples each terminal level from the transition row;
    an integer conditions every run on that level.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    row = row if row is not None else transition_row(n, model.alpha, model.truncation)
    if row.truncation != model.truncation:
        raise ValueError("transition row length differs from model truncation")
    # validates sigma and the grid
    cfg = SdeConfig(sigma=sigma, time_grid=times if times is not None
                    else checkpoint_times(default_tau(model, sigma, outcome)),
                    rng_seed=seed, outcome=outcome)
    t = cfg.time_grid
    E = model.energies()
    amps = row.normalised_amplitudes()
    x_grid = np.linspace(0.0, model.post_width, x_points) if density else None
    job = _Job(amps, E, sigma, t, seed, outcome, basis_matrix(x_grid, model) if density else None)

    K = t.size
    sH, sH2 = KahanSum(K), KahanSum(K)
    sV, sV2, sdV2 = KahanSum(K), KahanSum(K), KahanSum(K - 1)
    sdV = KahanSum(K - 1)
    sRho = KahanSum((K, x_points)) if density else None
    counts = np.zeros(model.truncation, dtype=np.int64)
    keep_H, keep_V, outcomes = [], [], []

    def consume(res):
        j, H, V, rho = res
        counts[j - 1] += 1
        outcomes.append(j)
        sH.add(H)
        sH2.add(H * H)
        sV.add(V)
        sV2.add(V * V)
        dV = np.diff(V)
        sdV.add(dV)
        sdV2.add(dV * dV)
        if sRho is not None:
            sRho.add(rho)
        if keep_paths:
            keep_H.append(H)
            keep_V.append(V)

    if threads == 1:
        for i in range(M):
            consume(_one(job, i))
    else:
        workers = threads if threads > 0 else None
        size = max(1, min(256, M // (4 * (workers or 4)) or 1))
        chunks = [(job, range(s, min(M, s + size))) for s in range(0, M, size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_chunk, chunks):
                for res in batch:
                    consume(res)

    mean_H = sH.total / M
    mean_V = sV.total / M

    def se(s2, mean):
        if M < 2:
            return np.zeros_like(mean)
        var = np.maximum(s2.total / M - mean**2, 0.0) * M / (M - 1)
        return np.sqrt(var / M)

    initial_energy = float(math.pi**2 * row.initial_index**2) if row.initial_index >= 1 else float(mean_H[0])
    return EnsembleSummary(
        run_count=M,
        mode="sampled" if outcome is None else "conditioned",
        outcome=outcome,
        checkpoint_times=t,
        mean_H=mean_H,
        se_H=se(sH2, mean_H),
        mean_V=mean_V,
        se_V=se(sV2, mean_V),
        se_dV=se(sdV2, sdV.total / M),
        terminal_counts=counts,
        priors=row.normalised(),
        energies=E,
        initial_energy=initial_energy,
        x_grid=x_grid,
        mean_density=sRho.total / M if sRho is not None else None,
        H_paths=np.array(keep_H) if keep_paths else None,
        V_paths=np.array(keep_V) if keep_paths else None,
        outcomes=np.array(outcomes),
        seed=seed,
        config={"model": asdict(model), "sigma": sigma, "M": M, "outcome": outcome,
                "n": row.initial_index, "density": density, "x_points": x_points},
    )


@dataclass
class TestReport:
    __test__ = False  # not a pytest class

    name: str
    passed: bool
    statistic: np.ndarray | float
    detail: dict[str, Any] = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail.get('summary', '')}"


# Two-sided tail mass outside +-3 sigma; rare cells use the exact binomial test at this level.
THREE_SIGMA_P = 2.0 * stats.norm.sf(3.0)


def terminal_frequency_test(summary: EnsembleSummary, row: TransitionRow | None = None) -> TestReport:
    """Compare terminal level counts with the transition row.

    Cells with ``M pi_m >= 5`` get a normal z-score (pass if ``|z| < 3``) and
    enter the chi-square statistic. Rarer cells use the exact two-sided
    binomial test at the same 3-sigma level, where the normal approximation
    does not hold.
    """
    if summary.mode != "sampled":
        raise ValueError("terminal frequency test needs a sampled-outcome ensemble")
    p = row.normalised() if row is not None else summary.priors
    M = summary.run_count
    k = summary.terminal_counts
    expected = M * p
    z = np.full(p.size, np.nan)
    ok = np.ones(p.size, dtype=bool)
    big = expected >= 5
    z[big] = (k[big] - expected[big]) / np.sqrt(expected[big] * (1 - p[big]))
    ok[big] = np.abs(z[big]) < 3
    for m in np.flatnonzero(~big):
        if p[m] == 0:
            ok[m] = k[m] == 0
        else:
            ok[m] = stats.binomtest(int(k[m]), M, p[m]).pvalue >= THREE_SIGMA_P
    chi2 = float(np.sum((k[big] - expected[big]) ** 2 / expected[big]))
    dof = int(big.sum()) - 1
    chi2_p = float(stats.chi2.sf(chi2, dof)) if dof > 0 else math.nan
    passed = bool(ok.all())
    return TestReport("terminal_frequency", passed, z, {
        "chi2": chi2, "dof": dof, "chi2_p": chi2_p, "cell_ok": ok,
        "summary": f"max|z|={np.nanmax(np.abs(z)) if big.any() else 0:.2f}, chi2={chi2:.2f} (dof {dof}, p={chi2_p:.3f}), "
                   f"failed cells={np.flatnonzero(~ok) + 1}",
    })


def martingale_test(summary: EnsembleSummary, reference: float | None = None) -> TestReport:
    """``z = (mean_H - ref) / se_H`` at every checkpoint with ``t > 0``; pass if all ``|z| < 3``.

    ``ref`` defaults to the pre-quench energy ``pi**2 n**2``. A checkpoint
    with zero spread gets ``z = 0`` when it sits on the reference and
    ``inf`` otherwise.
    """
    if summary.mode != "sampled":
        raise ValueError("H_t is a martingale only without conditioning on the outcome")
    ref = summary.initial_energy if reference is None else reference
    t = summary.checkpoint_times
    sel = t > 0
    diff = summary.mean_H[sel] - ref
    se = summary.se_H[sel]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0),
                     np.where(np.abs(diff) <= 1e-12 * abs(ref), 0.0, np.inf))
    passed = bool(np.all(np.abs(z) < 3))
    deficit = float(summary.mean_H[0] - ref) / ref
    return TestReport("martingale", passed, z, {
        "reference": ref, "t0_relative_deficit": deficit,
        "summary": f"max|z|={np.max(np.abs(z)):.2f} over {z.size} checkpoints, "
                   f"truncation deficit at t=0 {deficit:.2e}",
    })


def supermartingale_test(summary: EnsembleSummary) -> TestReport:
    """Mean energy variance must not rise by more than one standard error between checkpoints.

    The slack uses the standard error of the per-path increment, which is the
    right scale for a difference of two correlated means.
    """
    if summary.mode != "sampled":
        raise ValueError("supermartingale test expects a sampled-outcome ensemble")
    rise = np.diff(summary.mean_V)
    margin = summary.se_dV - rise
    passed = bool(np.all(rise <= summary.se_dV))
    return TestReport("supermartingale", passed, margin, {
        "summary": f"worst margin {np.min(margin):.3g} (rise - SE <= 0 required), "
                   f"V(t_end)/V(0)={summary.mean_V[-1] / summary.mean_V[0] if summary.mean_V[0] else 0:.3g}",
    })


def mean_density_surface(summary: EnsembleSummary):
    """``(x_grid, times, surface)`` with ``surface[k, i]`` the ensemble mean of ``rho_t(x_i)``."""
    if summary.mean_density is None:
        raise ValueError("ensemble was run without density accumulation")
    return summary.x_grid, summary.checkpoint_times, summary.mean_density


def mixed_state_density(x_grid, model: WellModel, probs) -> np.ndarray:
    """``sum_m pi_m chi_m(x)**2``, the fully reduced ensemble density."""
    chi = basis_matrix(x_grid, model)
    return np.asarray(probs) @ chi**2
