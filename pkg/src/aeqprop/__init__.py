"""Simulator and verification lab for agnostic equilibrium propagation."""

from .core import (
    AeqpropError,
    CouplingSpec,
    CurvatureError,
    DomainError,
    EnergyModel,
    Layout,
    NudgeVariant,
    NumericError,
    RelaxOutcome,
    Segment,
    StructureError,
    global_energy,
    lift_nudge,
)
from .models import HopfieldModel, LegendreTarget, LinRegModel, init_params, sample_target

__version__ = "0.1.0"
