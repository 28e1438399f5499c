"""Supermarket models with different servers: simulation and exact rewards."""
from .exceptions import CapacityError, ConfigurationError, HetsimError, NumericalError, StructuralError
from .model import (
    ModelConfig,
    SelectionProfile,
    Tandem,
    TransitionDistribution,
    Weighted,
    arrival_rate_at_rank,
    jump_distribution,
    rank_probabilities,
    rank_selection_fraction,
    rank_selection_probability,
    route_arrival,
    selection_values,
)
from .reward import (
    Constant,
    DiscountParams,
    HorizonParams,
    PerServerQueueLength,
    RewardEstimate,
    RMax,
    RMin,
    TotalQueueLength,
    evaluate_design_criteria,
    evaluate_reward,
    expected_reward_discounted,
    expected_reward_finite,
    re_k,
    theta_k,
)
from .oracle import (
    GeneratorMatrix,
    StationaryResult,
    build_generator,
    discounted_expected_reward,
    stationary_distribution,
    transient_expected_reward,
)
from .presets import PAPER_TABLES, Preset, preset_config, run_experiment
from .sim import SimPlan, SimStats, mc_reward_estimate, simulate
from .streams import GENERATOR_ID, make_stream

__version__ = "0.1.0"

from .estimators import CTMCOracle, RewardEstimator, SupermarketSimulator  # noqa: E402
