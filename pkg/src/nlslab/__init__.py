"""nlslab: threshold dynamics for the 3d focusing cubic NLS with repulsive potentials.

Modules: ``fields`` (grids, spectral calculus), ``potentials``,
``ground_state``, ``evolution``, ``diagnostics``, ``modulation`` and
``experiments`` (scenarios and reports). The command line lives in ``cli``.
"""

__version__ = "0.1.0"

from .fields import Field, Grid3, sample
from .potentials import Potential, validate_class
from .ground_state import GridGroundState, constants, default_profile, solve_petviashvili, solve_shooting
from .evolution import PropagatorConfig, evolve, step
from .diagnostics import Diagnostics, delta, energy, mass
from .modulation import fit, track
from .experiments import Scenario, builtin, run, report_emit, tune_to_threshold

__all__ = [
    "Field", "Grid3", "sample", "Potential", "validate_class", "GridGroundState", "constants",
    "default_profile", "solve_petviashvili", "solve_shooting", "PropagatorConfig", "evolve", "step",
    "Diagnostics", "delta", "energy", "mass", "fit", "track", "Scenario", "builtin", "run",
    "report_emit", "tune_to_threshold",
]
