"""Congestion-aware optimal transport solvers.

Subpackages cover four related problems: Wardrop traffic equilibria on
networks, discrete Kantorovich transport with dual potentials, grid
Beckmann minimal flows with transport-density construction, and the
urban-planning functional built on Wasserstein costs.
"""

from .beckmann import (
    BeckmannResult,
    rasterize_transport_density,
    rasterize_v_gamma,
    reconstruct_trajectories,
    solve_beckmann,
    solve_dual_quadratic,
    weighted_beckmann_duality_check,
)
from .congestion import CongestionSpec, EdgeCosts
from .errors import CongestedTransportError
from .grids import Grid, ScalarField, VectorField, divergence
from .kantorovich import (
    Coupling,
    DiscreteMeasure,
    OTResult,
    PotentialPair,
    gateaux_check,
    hotelling_demands,
    hotelling_recover_prices,
    lp_cost_matrix,
    solve_discrete_ot,
    wasserstein_distance,
    wasserstein_p,
)
from .network import (
    Network,
    PathSet,
    enumerate_paths,
    load_network,
    parse_network,
    shortest_distances,
    validate_network,
)
from .urbanplan import (
    CitySolution,
    ConcentrationSpec,
    SpreadSpec,
    eval_total,
    minimize_with_atomic_G,
    solve_p_nu,
    solve_quadratic_city,
)
from .wardrop import (
    DemandSpec,
    EquilibriumResult,
    all_or_nothing,
    brute_force_equilibrium,
    link_metric,
    objective,
    solve_fixed_demand,
    solve_variable_demand,
    verify_conservation,
    verify_wardrop,
)

__all__ = [
    "BeckmannResult",
    "CitySolution",
    "ConcentrationSpec",
    "CongestionSpec",
    "CongestedTransportError",
    "Coupling",
    "DemandSpec",
    "DiscreteMeasure",
    "EdgeCosts",
    "EquilibriumResult",
    "Grid",
    "Network",
    "OTResult",
    "PathSet",
    "PotentialPair",
    "ScalarField",
    "SpreadSpec",
    "VectorField",
    "all_or_nothing",
    "brute_force_equilibrium",
    "divergence",
    "enumerate_paths",
    "eval_total",
    "gateaux_check",
    "hotelling_demands",
    "hotelling_recover_prices",
    "link_metric",
    "load_network",
    "lp_cost_matrix",
    "minimize_with_atomic_G",
    "objective",
    "parse_network",
    "rasterize_transport_density",
    "rasterize_v_gamma",
    "reconstruct_trajectories",
    "shortest_distances",
    "solve_beckmann",
    "solve_discrete_ot",
    "solve_dual_quadratic",
    "solve_fixed_demand",
    "solve_p_nu",
    "solve_quadratic_city",
    "solve_variable_demand",
    "validate_network",
    "verify_conservation",
    "verify_wardrop",
    "wasserstein_distance",
    "wasserstein_p",
    "weighted_beckmann_duality_check",
]

__version__ = "0.1.0"
