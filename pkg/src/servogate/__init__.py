"""Uncertainty-gated execution of learned shape-servo policies."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .gate import Action, Component, GateConfig, GateDecision, Mode, UncertaintyVector, VarianceTrace, evaluate_gate
from .se3 import EnsembleOutputs, RigidTransform, aggregate, chordal_mean_rotation, geodesic_distance

__all__ = [
    "Action",
    "Component",
    "EnsembleOutputs",
    "GateConfig",
    "GateDecision",
    "Mode",
    "RigidTransform",
    "UncertaintyVector",
    "VarianceTrace",
    "aggregate",
    "chordal_mean_rotation",
    "evaluate_gate",
    "geodesic_distance",
]
