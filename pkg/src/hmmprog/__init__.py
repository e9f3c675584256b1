"""Tied-mixture absorbing hidden Markov models for asset degradation."""

from .distributions import ComponentParams, Family, SuffStats
from .errors import ConfigError, InvalidInputError, StarvedComponentError, ZeroLikelihoodError
from .tmhmm import (
    EmConfig,
    EndLabel,
    ObservationSequence,
    TiedMixtureHmm,
    absorbing_mask,
    em_fit,
    forward_backward,
    forward_filter,
    initial_model,
    sample_sequence,
    validate,
    viterbi,
)

from .prognostics import (
    Belief,
    ProfileLibrary,
    failure_time_distribution,
    fit_profile_library,
    posterior_predictive_check,
    profile_posterior,
    survival_curve,
    tradeoff_curve,
    update_belief,
)
from .pomdp import ActionSpec, AlphaVectorPolicy, MaintenancePomdp, build_pomdp, default_instance, value_iteration
from .fleetsim import FleetRun, generate_fleet, run_policy_loop

__version__ = "0.1.0"
