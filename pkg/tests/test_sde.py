import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrelax.filtering import SdeConfig, StateVector, sample_brownian, simulate_trajectory
from qrelax.relaxation import tau_r_bound
from qrelax.sde import (
    IntegratorConfig,
    brownian_bridge_refine,
    drift_diffusion,
    energy_moments,
    integrate_with_noise,
    noise_on_grid,
    step,
)
from qrelax.spectrum import WellModel, transition_row
from qrelax.streams import DEFAULT_SEED

M4 = WellModel(alpha=2.5, truncation=4)
E4 = M4.energies()
A4 = transition_row(1, 2.5, 4).normalised_amplitudes().astype(complex)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(dt=1e-3, scheme="heun")
    with pytest.raises(ValueError):
        IntegratorConfig(dt=1e-3, truncation=1)


def test_drift_diffusion_two_level():
    a = np.array([1, 1], dtype=complex) / math.sqrt(2)
    drift, diff, H, V = drift_diffusion(StateVector(a), [0.0, 2.0], 1.0)
    assert H == pytest.approx(1.0) and V == pytest.approx(1.0)
    assert np.allclose(diff, 0.5 * np.array([-1.0, 1.0]) * a)
    assert np.allclose(drift, np.array([-0.125, -2j - 0.125]) * a)


def test_drift_diffusion_eigenstate_has_no_noise():
    a = np.eye(4, dtype=complex)[2]
    drift, diff, H, V = drift_diffusion(a, E4, 1.3)
    assert np.all(diff == 0)
    assert V == 0
    assert np.allclose(drift, -1j * E4[2] * a)


def test_drift_diffusion_rejects_unnormalised():
    with pytest.raises(ValueError, match="normalised"):
        drift_diffusion(np.array([1.0, 1.0]), [0.0, 1.0], 1.0)


def test_step_rejects_bad_increment():
    with pytest.raises(ValueError):
        step(StateVector(A4), math.nan, E4, IntegratorConfig(dt=1e-3))


def test_eigenstate_only_gains_phase():
    cfg = IntegratorConfig(dt=1e-3, truncation=4)
    s = StateVector(np.eye(4, dtype=complex)[1])
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = step(s, rng.standard_normal() * math.sqrt(cfg.dt), E4, cfg)
    assert np.allclose(np.abs(s.amplitudes), np.eye(4)[1], atol=1e-14)
    assert s.time_stamp == pytest.approx(0.1)


def test_zero_noise_is_unitary_phase():
    cfg = IntegratorConfig(dt=1e-5, sigma=0.0, truncation=4)
    s = StateVector(A4)
    for _ in range(1000):
        s = step(s, 0.0, E4, cfg)
    assert np.allclose(s.amplitudes, A4 * np.exp(-1j * E4 * 0.01), atol=1e-5)
    # explicit Euler inflates each level by (1 + E**2 dt**2)**(1/2) per step
    assert np.allclose(np.abs(s.amplitudes), np.abs(A4), atol=1e-4)


def test_renormalised_norm_is_exact():
    cfg = IntegratorConfig(dt=1e-3, truncation=4)
    s = StateVector(A4)
    rng = np.random.default_rng(DEFAULT_SEED)
    for _ in range(500):
        s = step(s, rng.standard_normal() * math.sqrt(cfg.dt), E4, cfg)
        assert abs(s.norm2 - 1) < 1e-12


def test_unrenormalised_norm_defect_is_first_order():
    rng = np.random.default_rng(DEFAULT_SEED)
    dts = np.array([1e-3, 1e-4, 1e-5])
    defects = []
    for dt in dts:
        cfg = IntegratorConfig(dt=dt, truncation=4, renormalise_each_step=False)
        z = rng.standard_normal(4000)
        d = [abs(step(StateVector(A4), zi * math.sqrt(dt), E4, cfg).norm2 - 1) for zi in z]
        defects.append(np.mean(d))
    slope = np.polyfit(np.log(dts), np.log(defects), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_energy_moments_examples():
    H, V, b = energy_moments(np.array([1, 1]) / math.sqrt(2), [0.0, 2.0])
    assert (H, V, b) == pytest.approx((1.0, 1.0, 0.0))
    H, V, b = energy_moments(np.array([3.0, 0.0]), [5.0, 7.0])  # unnormalised input is fine here
    assert (H, V, b) == pytest.approx((5.0, 0.0, 0.0))


def test_batched_and_single_updates_agree():
    rng = np.random.default_rng(4)
    t = np.linspace(0, 0.01, 11)
    W = np.stack([sample_brownian(t, rng) for _ in range(3)], axis=1)
    cfg = IntegratorConfig(dt=1e-3, truncation=4)
    batch = integrate_with_noise(np.tile(A4, (3, 1)), t, W, E4, cfg)
    for p in range(3):
        single = integrate_with_noise(A4, t, W[:, p], E4, cfg)
        assert np.allclose(batch.amplitudes[:, p], single.amplitudes, atol=1e-15)


# --- noise handling ---------------------------------------------------------

def test_noise_subsampling():
    t = np.linspace(0, 1, 101)
    W = np.arange(101.0)
    grid, Wg = noise_on_grid(t, W, 0.1)
    assert np.allclose(grid, np.linspace(0, 1, 11))
    assert np.array_equal(Wg, W[::10])


def test_noise_grid_mismatch_errors():
    t = np.linspace(0, 1, 11)
    W = np.zeros(11)
    with pytest.raises(ValueError, match="multiple"):
        noise_on_grid(t, W, 0.3)
    with pytest.raises(ValueError, match="rng"):
        noise_on_grid(t, W, 0.05)
    with pytest.raises(ValueError, match="nest"):
        noise_on_grid(np.array([0.0, 0.3, 1.0]), np.zeros(3), 0.25)
    with pytest.raises(ValueError, match="t = 0"):
        noise_on_grid(np.array([0.1, 1.0]), np.zeros(2), 0.1)


def test_bridge_refinement_keeps_known_points():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 1, 5)
    W = np.array([0.0, 0.3, -0.2, 0.1, 0.5])
    grid, Wf = noise_on_grid(t, W, 1 / 64, rng)
    assert np.allclose(Wf[::16], W)


def test_bridge_refinement_statistics():
    # midpoint of a bridge pinned at 0 and 0 over [0, 1] has variance 1/4
    rng = np.random.default_rng(DEFAULT_SEED)
    mids = np.array([brownian_bridge_refine([0.0, 1.0], [0.0, 0.0], [0.0, 0.5, 1.0], rng)[1]
                     for _ in range(20_000)])
    assert abs(mids.mean()) < 3 * math.sqrt(0.25 / 20_000)
    assert abs(mids.var(ddof=1) - 0.25) < 3 * 0.25 * math.sqrt(2 / 20_000)


def test_bridge_requires_nested_grid():
    with pytest.raises(ValueError):
        brownian_bridge_refine([0.0, 0.3], [0.0, 1.0], [0.0, 0.5, 1.0], np.random.default_rng(0))


def test_integrate_rejects_mismatched_state():
    with pytest.raises(ValueError):
        integrate_with_noise(A4[:3], np.linspace(0, 1, 3), np.zeros(3), E4, IntegratorConfig(dt=0.5))


# --- dynamics ------------------------------------------------------------------

@pytest.fixture(scope="module")
def em_paths():
    dt, T, P = 1e-4, 0.5, 400
    rng = np.random.default_rng(DEFAULT_SEED)
    t = np.linspace(0, T, int(round(T / dt)) + 1)
    W = np.cumsum(np.vstack([np.zeros(P), rng.standard_normal((t.size - 1, P)) * math.sqrt(dt)]), axis=0)
    tr = integrate_with_noise(np.tile(A4, (P, 1)), t, W, E4, IntegratorConfig(dt=dt, truncation=4))
    H, V, beta = energy_moments(tr.amplitudes, E4)
    return dt, np.diff(W, axis=0), H, V, beta


def test_energy_increment_is_variance_times_noise(em_paths):
    # dH = sigma V dW
    dt, dW, H, V, _ = em_paths
    x = (V[:-1] * dW).ravel()
    slope = x @ np.diff(H, axis=0).ravel() / (x @ x)
    assert slope == pytest.approx(1.0, abs=0.15)


def test_variance_drift(em_paths):
    # dV = -sigma**2 V**2 dt + sigma beta dW
    dt, dW, H, V, beta = em_paths
    y = (np.diff(V, axis=0) - beta[:-1] * dW).ravel()
    x = (-V[:-1] ** 2 * dt).ravel()
    assert x @ y / (x @ x) == pytest.approx(1.0, abs=0.15)


def test_energy_is_martingale(em_paths):
    _, _, H, _, _ = em_paths
    se = H[-1].std(ddof=1) / math.sqrt(H.shape[1])
    assert abs(H[-1].mean() - H[0, 0]) < 3 * se


@pytest.mark.slow
def test_terminal_state_matches_filtering():
    # driven by the innovations of a filtering path, the integrator must settle
    # in the same level that path was conditioned on
    T = 10 * tau_r_bound(2.5, 1, 1.0)
    dt = 1e-4
    n = int(round(T / dt))
    t = np.linspace(0, n * dt, 2 * n + 1)
    row = transition_row(1, 2.5, 4)
    cfg = SdeConfig(sigma=1.0, time_grid=t, rng_seed=DEFAULT_SEED)
    trs = [simulate_trajectory(row, cfg, E4, index=i) for i in range(20)]
    W = np.stack([tr.W_path for tr in trs], axis=1)
    em = integrate_with_noise(np.tile(A4, (20, 1)), t, W, E4, IntegratorConfig(dt=dt, truncation=4))
    final = np.abs(em.amplitudes[-1]) ** 2
    for p, tr in enumerate(trs):
        assert np.argmax(final[p]) + 1 == tr.outcome_j
        assert final[p, tr.outcome_j - 1] > 0.99


@settings(max_examples=30, deadline=None)
@given(z=st.floats(-5, 5), phase=st.floats(0, 2 * math.pi))
def test_step_preserves_norm_property(z, phase):
    a = A4 * np.exp(1j * phase)
    s = step(StateVector(a), z * math.sqrt(1e-3), E4, IntegratorConfig(dt=1e-3, truncation=4))
    assert abs(s.norm2 - 1) < 1e-12
