"""Collaborative safe Bayesian optimization for antenna parameter tuning."""

from .collaborative import CollaboratorRecord, CoSBO, TransferSet, pearson, select_collaborator, transfer_points
from .gp import ContextPoint, ContextualGP, KernelParams, Observation
from .safeopt import ParameterGrid, SafeOptMC, SafeOptState

__all__ = [
    "CollaboratorRecord",
    "ContextPoint",
    "ContextualGP",
    "CoSBO",
    "KernelParams",
    "Observation",
    "ParameterGrid",
    "SafeOptMC",
    "SafeOptState",
    "TransferSet",
    "pearson",
    "select_collaborator",
    "transfer_points",
]

__version__ = "0.1.0"
