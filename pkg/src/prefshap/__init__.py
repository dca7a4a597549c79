"""Shapley valuation of preference-data sources for KL-regularized alignment.

Coalition policies are built training-free from per-source aligned policies by
log-probability arithmetic; everything runs on exact tabular policies.
"""

__version__ = "0.1.0"

from .alignment import (
    AlignmentConfig,
    dpo_fit,
    dpo_objective,
    dpo_objective_and_grad,
    exact_aligned_policy,
    exact_coalition_policy,
    sequential_dpo,
)
from .arithmetic import CoalitionModelProvider, coalition_model, coalition_scores, compose_coalition
from .policy_core import (
    Policy,
    World,
    kl_divergence,
    log_prob,
    sample_response,
    softmax_policy_from_logits,
    tv_distance,
)
from .reward import (
    FitOptions,
    PreferenceDataset,
    RewardTable,
    bt_log_likelihood,
    fit_bt_reward,
    implicit_reward,
    pref_prob,
)
from .synthgen import WorldSpec, generate_preferences, make_random_world
from .valuation import (
    ShapleyResult,
    UtilityCache,
    coalition_utility,
    exact_shapley,
    mc_permutation_shapley,
    policy_value,
    regression_shapley,
    spatial_signature,
)
