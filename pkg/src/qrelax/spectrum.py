"""Closed-form spectral data of the infinite square well before and after expansion.

All internal quantities are dimensionless: hbar = 1 and energies are measured
in the characteristic energy ``eps = hbar**2 / (2 mu L**2)`` of the original
well, so the pre-expansion levels are ``pi**2 n**2`` and the post-expansion
levels are ``pi**2 m**2 / alpha**2``. ``WellModel`` converts to SI units at the
boundaries when ``unit_mode == "physical"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants

PI2 = math.pi**2

# |m - alpha n| below this (relative) is treated as the removable 0/0 point.
RESONANCE_RTOL = 1e-9
# m / alpha this close to a non-resonant integer gives sin(pi m / alpha) == 0.
NODE_ATOL = 1e-12

UNIT_MODES = ("dimensionless", "physical")


@dataclass(frozen=True)
class WellModel:
    """Static definition of the quench problem.

    Parameters
    ----------
    mass : float
        Particle mass (kg in physical mode, ignored otherwise).
    width : float
        Initial well width L (m in physical mode).
    alpha : float
        Expansion factor, the well grows from L to ``alpha * L``.
    truncation : int
        Number of post-expansion eigenstates kept in the dynamics.
    unit_mode : {"dimensionless", "physical"}
        Unit convention used by the public energy accessors.
    """

    mass: float = 1.0
    width: float = 1.0
    alpha: float = 2.5
    truncation: int = 50
    unit_mode: str = "dimensionless"
    hbar: float = field(default=constants.hbar, repr=False)

    def __post_init__(self) -> None:
        if not self.alpha >= 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if int(self.truncation) != self.truncation or self.truncation < 2:
            raise ValueError(f"truncation must be an integer >= 2, got {self.truncation}")
        if not self.mass > 0:
            raise ValueError(f"mass must be > 0, got {self.mass}")
        if not self.width > 0:
            raise ValueError(f"width must be > 0, got {self.width}")
        if self.unit_mode not in UNIT_MODES:
            raise ValueError(f"unit_mode must be one of {UNIT_MODES}, got {self.unit_mode!r}")

    @property
    def energy_scale(self) -> float:
        """Characteristic energy ``hbar**2 / (2 mu L**2)`` in joules."""
        return self.hbar**2 / (2.0 * self.mass * self.width**2)

    @property
    def time_scale(self) -> float:
        """Seconds per dimensionless time unit (``hbar / eps``)."""
        return self.hbar / self.energy_scale

    @property
    def sigma_scale(self) -> float:
        """SI value of sigma (J^-1 s^-1/2) corresponding to a dimensionless sigma of 1.

        With this choice ``1 / (sigma**2 eps**2)`` equals ``time_scale``.
        """
        return 1.0 / (self.energy_scale * math.sqrt(self.time_scale))

    def to_physical_energy(self, e):
        return np.asarray(e, dtype=float) * self.energy_scale

    def to_dimensionless_energy(self, e):
        return np.asarray(e, dtype=float) / self.energy_scale

    def to_physical_time(self, t):
        return np.asarray(t, dtype=float) * self.time_scale

    def to_dimensionless_time(self, t):
        return np.asarray(t, dtype=float) / self.time_scale

    def to_physical_sigma(self, sigma):
        return np.asarray(sigma, dtype=float) * self.sigma_scale

    def to_dimensionless_sigma(self, sigma):
        return np.asarray(sigma, dtype=float) / self.sigma_scale

    def _out(self, e_dimless: float) -> float:
        if self.unit_mode == "physical":
            return float(e_dimless * self.energy_scale)
        return float(e_dimless)

    @property
    def post_width(self) -> float:
        return self.alpha * self.width

    def energies(self) -> np.ndarray:
        """Dimensionless post-expansion levels ``E_1 .. E_N``."""
        m = np.arange(1, self.truncation + 1, dtype=float)
        return PI2 * m**2 / self.alpha**2


@dataclass(frozen=True)
class TransitionRow:
    """Transition data from initial eigenstate ``n`` into the first N new eigenstates.

    ``amplitudes`` are the signed overlaps; ``probs`` are their squares. Rows are
    not renormalised after truncation, see ``deficit``.
    """

    initial_index: int
    amplitudes: np.ndarray
    alpha: float = 1.0

    @property
    def probs(self) -> np.ndarray:
        return self.amplitudes**2

    @property
    def truncation(self) -> int:
        return len(self.amplitudes)

    @property
    def deficit(self) -> float:
        """Probability mass lost to truncation."""
        return float(1.0 - self.probs.sum())

    def normalised(self) -> np.ndarray:
        p = self.probs
        total = p.sum()
        if total <= 0:
            raise ValueError("transition row has no positive entry")
        return p / total

    def normalised_amplitudes(self) -> np.ndarray:
        return self.amplitudes / math.sqrt(self.probs.sum())

    @classmethod
    def from_probs(cls, probs, initial_index: int = 0, alpha: float = 1.0) -> "TransitionRow":
        """Row from bare probabilities (non-negative amplitudes)."""
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        return cls(initial_index, np.sqrt(p), alpha)


def _check_index(name: str, k: int) -> None:
    if k < 1:
        raise ValueError(f"{name} must be >= 1, got {k}")


def pre_expansion_energy(n: int, model: WellModel) -> float:
    """Level ``n`` of the original well, ``pi**2 n**2`` in units of eps."""
    _check_index("n", n)
    return model._out(PI2 * n**2)


def post_expansion_energy(m: int, model: WellModel) -> float:
    """Level ``m`` of the expanded well, ``pi**2 m**2 / alpha**2`` in units of eps."""
    _check_index("m", m)
    return model._out(PI2 * m**2 / model.alpha**2)


def eigenfunction_value(m: int, x, width: float):
    """Normalised box eigenfunction ``sqrt(2/width) sin(m pi x / width)``.

    Accepts scalar or array ``x``; every point must lie in ``[0, width]``.
    """
    _check_index("m", m)
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or np.any(xa > width):
        raise ValueError(f"x must lie in [0, {width}]")
    vals = math.sqrt(2.0 / width) * np.sin(m * math.pi * xa / width)
    # sin(m pi) is ~1e-16 in floating point; the boundary value is exactly zero.
    vals = np.where((xa == 0) | (xa == width), 0.0, vals)
    return float(vals) if vals.ndim == 0 else vals


def _node_or_resonance(n, m, alpha):
    """Return (resonant, node) masks for arrays n, m."""
    ratio = m / alpha
    resonant = np.abs(m - alpha * n) < RESONANCE_RTOL * np.maximum(m, alpha * n)
    nearest = np.rint(ratio)
    node = (~resonant) & (np.abs(ratio - nearest) < NODE_ATOL * np.maximum(1.0, ratio))
    return resonant, node


def overlap_amplitude(n, m, alpha: float):
    """Signed overlap ``<phi_n | chi_m>`` of old and new eigenfunctions.

    Written as ``(-1)**(n+1) 2 n alpha**1.5 sin(pi m/alpha) / (pi (alpha**2 n**2 - m**2))``
    but evaluated through ``sinc(m/alpha - n)``, which has no 0/0 at ``m = alpha n``.
    """
    n_arr = np.asarray(n, dtype=float)
    m_arr = np.asarray(m, dtype=float)
    if np.any(n_arr < 1) or np.any(m_arr < 1):
        raise ValueError("n and m must be >= 1")
    if not alpha >= 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    ratio = m_arr / alpha
    # sin(pi m/alpha) / (pi (n - m/alpha)) = (-1)**(n+1) sinc(m/alpha - n)
    amp = 2.0 * n_arr * np.sinc(ratio - n_arr) / (math.sqrt(alpha) * (ratio + n_arr))
    resonant, node = _node_or_resonance(n_arr, m_arr, alpha)
    amp = np.where(resonant, 1.0 / math.sqrt(alpha), amp)
    amp = np.where(node, 0.0, amp)
    return float(amp) if amp.ndim == 0 else amp


def transition_probability(n, m, alpha: float):
    """Probability ``pi_nm`` of landing in new eigenstate ``m`` from old eigenstate ``n``.

    Equals ``4 alpha**3 n**2 sin(pi m/alpha)**2 / (pi**2 (m**2 - alpha**2 n**2)**2)``,
    with the limit ``1/alpha`` at ``m = alpha n`` and exact zeros where
    ``m/alpha`` is a non-resonant integer.
    """
    a = overlap_amplitude(n, m, alpha)
    return a * a


def transition_row(n: int, alpha: float, truncation: int) -> TransitionRow:
    _check_index("n", n)
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    m = np.arange(1, truncation + 1)
    return TransitionRow(n, np.asarray(overlap_amplitude(n, m, alpha)), alpha)


def conservation_residual(n: int, alpha: float, truncation: int) -> float:
    """Relative residual of ``sum_m pi_nm E_m = eps_n`` over the first ``truncation`` levels."""
    row = transition_row(n, alpha, truncation)
    m = np.arange(1, truncation + 1, dtype=float)
    energies = PI2 * m**2 / alpha**2
    eps_n = PI2 * n**2
    # fsum: 10^4 terms of mixed magnitude.
    total = math.fsum(row.probs * energies)
    return abs(total - eps_n) / eps_n


# sum_{m>=2} 4 m^2 / (m^2 - 1)^2 = pi^2/3 + 1/4
_SMALL_PERT_TAIL = PI2 / 3.0 + 0.25


def small_perturbation_probability(m: int, eps_pert: float) -> float:
    """Leading-order ``pi_1m`` for a slight expansion ``alpha = 1 + eps_pert``.

    ``4 m**2 eps**2 / (m**2 - 1)**2`` for ``m >= 2``; the ground-state entry is
    the complement of the whole series, ``1 - (pi**2/3 + 1/4) eps**2``.
    """
    _check_index("m", m)
    if eps_pert < 0:
        raise ValueError("eps_pert must be >= 0")
    if m == 1:
        return 1.0 - _SMALL_PERT_TAIL * eps_pert**2
    return 4.0 * m**2 * eps_pert**2 / (m**2 - 1) ** 2
