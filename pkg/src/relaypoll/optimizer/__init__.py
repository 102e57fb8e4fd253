from .aorp import RelayPolicy, aorp, baseline_cyclic_policy, switching_matrix, tour_weights
from .bnb import PositionSolution, RelayProblem, big_m_check, enumerate_positions, solve_positions
from .convex import ConvexSolution, convex_subproblem, switching_weights
from .frequencies import kkt_residual, optimize_frequencies
from .table import VisitTable, golden_ratio_sequence, largest_remainder

__all__ = [
    "RelayPolicy", "aorp", "baseline_cyclic_policy", "switching_matrix", "tour_weights",
    "PositionSolution", "RelayProblem", "big_m_check", "enumerate_positions", "solve_positions",
    "ConvexSolution", "convex_subproblem", "switching_weights",
    "kkt_residual", "optimize_frequencies",
    "VisitTable", "golden_ratio_sequence", "largest_remainder",
]
