"""Energy-driven stochastic reduction of a particle in a suddenly expanded square well."""

from .spectrum import WellModel, TransitionRow, transition_row, transition_probability, conservation_residual
from .filtering import SdeConfig, StateVector, FilteredTrajectory, simulate_trajectory, posterior, wavefunction
from .relaxation import tau_r, tau_r_bound, time_bound, prob_decay
from .ensemble import EnsembleSummary, run_ensemble
from .streams import DEFAULT_SEED

__version__ = "0.1.0"

__all__ = [
    "WellModel",
    "TransitionRow",
    "transition_row",
    "transition_probability",
    "conservation_residual",
    "SdeConfig",
    "StateVector",
    "FilteredTrajectory",
    "simulate_trajectory",
    "posterior",
    "wavefunction",
    "tau_r",
    "tau_r_bound",
    "time_bound",
    "prob_decay",
    "EnsembleSummary",
    "run_ensemble",
    "DEFAULT_SEED",
]
