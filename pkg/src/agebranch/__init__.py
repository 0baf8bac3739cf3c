"""Simulation and nonparametric estimation for age-dependent branching populations."""

from .estimators import (
    KERNELS,
    EstimationResult,
    Kernel,
    bandwidth_rule_of_thumb,
    bandwidth_theoretical,
    empirical_measure,
    estimate_all,
    estimate_B,
    estimate_fB_boundary,
    estimate_lambda,
    estimate_m,
    relative_error,
)
from .model import (
    MalthusData,
    MalthusError,
    RateDiagnostics,
    biased_rate,
    classify_regime,
    cumulative_hazard,
    lifetime_density,
    limit_measure_boundary,
    limit_measure_interior,
    solve_malthus,
)
from .offspring import OffspringLaw, offspring_from_spec
from .rates import RateFunction, rate_from_spec
from .tree import (
    Forest,
    ObservedSample,
    PopulationCapExceeded,
    PopulationTree,
    extract_sample,
    sample_lifetime,
    sample_offspring,
    simulate_forest,
    simulate_tree,
)

__version__ = "0.1.0"
