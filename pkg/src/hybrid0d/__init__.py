"""Hybrid lumped-parameter (0D) cardiovascular flow models with calibrated
and learned element parameters."""

from .circuit import (
    CircuitNetwork,
    Element,
    ElementParameters,
    FlowBC,
    FluidProperties,
    RCRBC,
    ResistanceBC,
    assemble_network,
    element_pressure_drop,
    poiseuille_parameters,
    validate_network,
)
from .solver import SimulationConfig, TimeSeriesSolution, cycle_convergence, residual_and_jacobian, simulate

__all__ = [
    "CircuitNetwork",
    "Element",
    "ElementParameters",
    "FlowBC",
    "FluidProperties",
    "RCRBC",
    "ResistanceBC",
    "SimulationConfig",
    "TimeSeriesSolution",
    "assemble_network",
    "cycle_convergence",
    "element_pressure_drop",
    "poiseuille_parameters",
    "residual_and_jacobian",
    "simulate",
    "validate_network",
]
