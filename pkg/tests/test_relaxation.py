import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from qrelax.filtering import SdeConfig, log_decay_factors, sample_brownian, simulate_trajectory
from qrelax.relaxation import (
    LAMBDA10,
    P95,
    RelaxQuery,
    empirical_relaxation_time,
    first_sustained_entry,
    level_gap,
    min_viable_eps,
    normal_cdf,
    normal_ppf,
    prob_decay,
    tau_r,
    tau_r_bound,
    tau_r_small,
    time_bound,
)
from qrelax.spectrum import PI2, WellModel, transition_row
from qrelax.streams import DEFAULT_SEED, trajectory_rng


# --- normal distribution --------------------------------------------------------

@pytest.mark.parametrize("x", [-8.0, -3.0, -0.5, 0.0, 1.0, 2.5, 6.0])
def test_normal_cdf_matches_scipy(x):
    assert normal_cdf(x) == pytest.approx(stats.norm.cdf(x), rel=1e-14)


@pytest.mark.parametrize("p", [1e-10, 1e-4, 0.02, 0.0243, 0.3, 0.5, 0.9, 0.95, 0.976, 1 - 1e-9])
def test_normal_ppf_accuracy(p):
    x = normal_ppf(p)
    assert x == pytest.approx(stats.norm.ppf(p), abs=1e-8)
    assert normal_cdf(x) == pytest.approx(p, rel=1e-9)


def test_normal_ppf_domain():
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            normal_ppf(p)


def test_normal_ppf_known_values():
    assert normal_ppf(0.5) == pytest.approx(0.0, abs=1e-15)
    assert normal_ppf(0.95) == pytest.approx(1.6448536269514722, abs=1e-12)


# --- decay probability and its inverse --------------------------------------------

def test_prob_decay_examples():
    # P = Phi(s/2 - lam/s) with s = sigma |omega| sqrt(t)
    assert prob_decay(10.0, 20.0, 1.0, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert prob_decay(10.0, 1.0, 1.0, 1.0) == pytest.approx(stats.norm.cdf(0.5 - 10), rel=1e-12)
    with pytest.raises(ValueError):
        prob_decay(10.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        prob_decay(10.0, 1.0, 1.0, 0.0)


def test_prob_decay_matches_monte_carlo():
    rng = np.random.default_rng(DEFAULT_SEED)
    lam, t, w = 2.0, 0.8, 3.0
    B = rng.standard_normal(200_000) * math.sqrt(t)
    logM = w * B - 0.5 * w**2 * t
    frac = np.mean(logM < -lam)
    p = prob_decay(lam, t, 1.0, w)
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / B.size)


def test_time_bound_worked_example():
    # sqrt(t) = (2q + sqrt(4q**2 + 80)) / 2 with q = 1.6449: 6.41, so t = 41.09
    t = time_bound(10.0, 1.0, 1.0, 0.95)
    assert t == pytest.approx(41.09, abs=0.01)
    oracle = optimize.brentq(lambda s: prob_decay(10.0, s, 1.0, 1.0) - 0.95, 1.0, 200.0, xtol=1e-14)
    assert t == pytest.approx(oracle, rel=1e-9)


def test_time_bound_median_case():
    # q = 0 leaves sqrt(t) = sqrt(2 lam) / (sigma |omega|)
    assert time_bound(10.0, 1.0, 2.0, 0.5) == pytest.approx(20.0 / 4.0, rel=1e-12)


def test_time_bound_sigma_scaling():
    a = time_bound(10.0, 1.0, 3.0)
    assert time_bound(10.0, 2.0, 3.0) == pytest.approx(a / 4, rel=1e-12)
    assert time_bound(10.0, 1.0, -3.0) == a


def test_time_bound_log_prior_and_errors():
    assert time_bound(10.0, 1.0, 1.0, log_prior=-1.0) < time_bound(10.0, 1.0, 1.0)
    with pytest.raises(ValueError, match="no real time bound"):
        time_bound(0.1, 1.0, 1.0, p=0.95, log_prior=-5.0)
    with pytest.raises(ValueError):
        time_bound(10.0, 1.0, 0.0)


@settings(max_examples=80, deadline=None)
@given(lam=st.floats(0.5, 30), sigma=st.floats(0.1, 5), omega=st.floats(0.1, 100), p=st.floats(0.5, 0.999))
def test_time_bound_round_trip(lam, sigma, omega, p):
    t = time_bound(lam, sigma, omega, p)
    assert prob_decay(lam, t, sigma, omega) == pytest.approx(p, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(0.5, 30), w=st.floats(0.1, 50), t1=st.floats(1e-3, 10), dt=st.floats(1e-3, 10))
def test_prob_decay_monotone_in_time_and_gap(lam, w, t1, dt):
    assert prob_decay(lam, t1 + dt, 1.0, w) >= prob_decay(lam, t1, 1.0, w)
    assert prob_decay(lam, t1, 1.0, 2 * w) >= prob_decay(lam, t1, 1.0, w)
    assert prob_decay(lam, t1, 1.0, -w) == prob_decay(lam, t1, 1.0, w)


# --- relaxation timescales --------------------------------------------------------

def test_level_gap():
    assert level_gap(2.5, 3, 2) == pytest.approx(5 * PI2 / 6.25)
    assert level_gap(2.5, 1, 2) < 0


def test_tau_r_examples():
    assert tau_r(1.0, 1, 1.0) == 0.0
    assert tau_r(2.5, 2, 1.0) == pytest.approx(40 * 2.5**4 / (math.pi**4 * 25), rel=1e-15)
    assert tau_r(2.5, 2, 1.0) == pytest.approx(0.642, abs=5e-4)
    assert tau_r(2.5, 1, 2.0) == pytest.approx(tau_r(2.5, 1, 1.0) / 4)
    with pytest.raises(ValueError):
        tau_r(0.9, 1, 1.0)
    with pytest.raises(ValueError):
        tau_r(2.5, 0, 1.0)


def test_tau_r_decreasing_in_level():
    vals = [tau_r(2.5, j, 1.0) for j in range(1, 8)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("j", [1, 2, 3, 5])
def test_tau_r_closed_form_matches_general_route(j):
    # the closed form rounds the constant 41.2 down to 40
    general = time_bound(LAMBDA10, 1.0, level_gap(2.5, j + 1, j), P95)
    assert tau_r(2.5, j, 1.0) == pytest.approx(general, rel=0.15)
    assert tau_r(2.5, j, 1.0, lam=9.999999) == pytest.approx(general, rel=1e-5)


def test_tau_r_bound_uses_nearest_level():
    assert tau_r_bound(2.5, 1, 1.0) == pytest.approx(time_bound(10.0, 1.0, level_gap(2.5, 2, 1)))
    for j in (2, 3, 4):
        assert tau_r_bound(2.5, j, 1.0) == pytest.approx(time_bound(10.0, 1.0, level_gap(2.5, j, j - 1)))
        assert tau_r_bound(2.5, j, 1.0) > tau_r(2.5, j, 1.0)
    assert tau_r_bound(1.0, 3, 1.0) == 0.0


def test_relax_query_validation():
    with pytest.raises(ValueError):
        RelaxQuery(2.5, 1.0, 1, lam=0.0)
    with pytest.raises(ValueError):
        RelaxQuery(2.5, 1.0, 1, p=1.0)


def test_tau_r_small_examples():
    q = normal_ppf(0.95)
    rad = 20 + 4 * math.log(4 * 0.1 / 3) + q * q
    # 14.66 when q is rounded to 1.65
    assert rad == pytest.approx(14.66, abs=0.02)
    w21 = 3 * PI2 / 1.1**2
    assert tau_r_small(0.1, 1.0) == pytest.approx((q + math.sqrt(rad)) ** 2 / w21**2, rel=1e-12)


def test_tau_r_small_boundary():
    eps0 = min_viable_eps(10.0, 0.95)
    q = normal_ppf(0.95)
    w21 = 3 * PI2 / (1 + eps0) ** 2
    assert tau_r_small(eps0, 1.0) == pytest.approx(q * q / w21**2, rel=1e-6)
    with pytest.raises(ValueError, match="eps >="):
        tau_r_small(eps0 / 2, 1.0)
    with pytest.raises(ValueError):
        tau_r_small(0.0, 1.0)


# --- empirical measurement ----------------------------------------------------------

def test_first_sustained_entry():
    t = np.arange(6.0)
    assert first_sustained_entry(t, [5, 0, 5, 0, 0, 0], 0.0, 1.0) == 3.0
    assert first_sustained_entry(t, [0] * 6, 0.0, 1.0) == 0.0
    assert first_sustained_entry(t, [0, 0, 0, 0, 0, 5], 0.0, 1.0) == math.inf


def test_empirical_time_without_expansion_is_zero():
    row = transition_row(1, 1.0, 10)
    E = WellModel(alpha=1.0, truncation=10).energies()
    cfg = SdeConfig(time_grid=np.linspace(0, 1, 11), rng_seed=1)
    stats_ = empirical_relaxation_time([simulate_trajectory(row, cfg, E, index=i) for i in range(5)], tau=0.0)
    assert np.all(stats_.times == 0)
    assert stats_.fraction_relaxed_by_tau == 1.0


def test_censored_paths_are_counted():
    row = transition_row(1, 2.5, 50)
    E = WellModel(alpha=2.5, truncation=50).energies()
    cfg = SdeConfig(time_grid=np.linspace(0, 1e-3, 5), rng_seed=1)
    s = empirical_relaxation_time([simulate_trajectory(row, cfg, E, index=i) for i in range(5)])
    assert s.censored_count == 5
    assert s.median == math.inf
    assert math.isnan(s.fraction_relaxed_by_tau)
    with pytest.raises(ValueError):
        empirical_relaxation_time([])


def test_relaxation_time_scales_with_inverse_sigma_squared():
    row = transition_row(1, 2.5, 50)
    E = WellModel(alpha=2.5, truncation=50).energies()
    medians = []
    for sigma in (1.0, 2.0):
        tau = tau_r_bound(2.5, 2, sigma)
        t = np.concatenate(([0.0], np.geomspace(tau / 100, 10 * tau, 400)))
        cfg = SdeConfig(sigma=sigma, time_grid=t, rng_seed=DEFAULT_SEED, outcome=2)
        trs = [simulate_trajectory(row, cfg, E, index=i) for i in range(400)]
        medians.append(empirical_relaxation_time(trs, tol_energy=1e-3, tau=tau).median)
    assert medians[1] / medians[0] == pytest.approx(0.25, rel=0.2)


@pytest.mark.parametrize("j", [2, 3])
def test_farther_levels_decay_sooner(j):
    # at the bound, competitors further away are suppressed more often
    t = np.array([0.0, tau_r(2.5, j, 1.0)])
    E = WellModel(alpha=2.5, truncation=8).energies()
    hits = np.zeros(8)
    n = 2000
    for i in range(n):
        B = sample_brownian(t, trajectory_rng(DEFAULT_SEED, i))
        hits += log_decay_factors(j, B, t, 1.0, E)[-1] < -10
    assert np.all(np.diff(hits[j:]) >= 0)
