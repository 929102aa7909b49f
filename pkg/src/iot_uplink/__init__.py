"""Spatiotemporal analysis of scheduled and grant-free IoT uplinks.

Stochastic-geometry success probabilities drive per-device QBD queues; the
two are solved jointly as a fixed point.  A slot-level Monte Carlo on PPP
realizations cross-checks the analysis.
"""

from .errors import (ConditioningError, ConvergenceError, DegenerateRealizationError, DomainError,
                     ModelError, TruncationError)
from .solver import (RAUL, SCUL, FrontierPoint, SolverReport, pareto_frontier, solve_raul, solve_scul,
                     sweep)
from .spatial import SystemParams

__all__ = [
    "ConditioningError", "ConvergenceError", "DegenerateRealizationError", "DomainError", "ModelError",
    "TruncationError", "RAUL", "SCUL", "FrontierPoint", "SolverReport", "pareto_frontier",
    "solve_raul", "solve_scul", "sweep", "SystemParams",
]
__version__ = "0.1.0"
