"""Average-reward approximate policy iteration with checkable error bounds."""
from .errors import (
    AvgRLError,
    ConvergenceError,
    DomainError,
    NumericalError,
    PreconditionError,
    StructuralError,
)
from .mdp import Mdp, StochasticPolicy, load_mdp, save_mdp, solve_bellman, solve_bellman_q

__version__ = "0.1.0"

__all__ = [
    "AvgRLError",
    "ConvergenceError",
    "DomainError",
    "Mdp",
    "NumericalError",
    "PreconditionError",
    "StochasticPolicy",
    "StructuralError",
    "load_mdp",
    "save_mdp",
    "solve_bellman",
    "solve_bellman_q",
]
