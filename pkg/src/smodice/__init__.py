"""Tabular state-occupancy matching for offline imitation learning.

The pipeline: estimate an MDP and the offline occupancy from logged data,
derive the log-ratio reward between expert and offline state occupancies,
solve the convex dual over state values, then extract a policy by weighted
behavior cloning.
"""

from smodice.mdp import (
    OccupancyMeasure,
    TabularMdp,
    TabularPolicy,
    compute_occupancy,
    marginalize_states,
    policy_from_occupancy,
    random_mdp,
)
from smodice.fdiv import CHI2, CHI2_QUADRATIC, KL, FDivergenceSpec, divergence, get_divergence
from smodice.solver import (
    SmodiceSolution,
    evaluate_solution,
    solve_closed_form_chi2,
    solve_iterative,
    weighted_bc,
)

__all__ = [
    "CHI2",
    "CHI2_QUADRATIC",
    "KL",
    "FDivergenceSpec",
    "OccupancyMeasure",
    "SmodiceSolution",
    "TabularMdp",
    "TabularPolicy",
    "compute_occupancy",
    "divergence",
    "evaluate_solution",
    "get_divergence",
    "marginalize_states",
    "policy_from_occupancy",
    "random_mdp",
    "solve_closed_form_chi2",
    "solve_iterative",
    "weighted_bc",
]
