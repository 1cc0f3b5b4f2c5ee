"""Backstepping ramp-metering control of a linearized ARZ road segment with routing feedback."""

from .model import ModelParams, compute_equilibrium, admissible_bounds
from .grid import Grid
from .kernels import make_routing_gain, synthesize, compute_gains
from .simulator import Plant, SimConfig, init_scenario, run_simulation

__all__ = [
    "Grid",
    "ModelParams",
    "Plant",
    "SimConfig",
    "admissible_bounds",
    "compute_equilibrium",
    "compute_gains",
    "init_scenario",
    "make_routing_gain",
    "run_simulation",
    "synthesize",
]
__version__ = "0.1.0"
