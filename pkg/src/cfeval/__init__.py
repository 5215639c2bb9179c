"""Counterfactual evaluation of ranking-policy changes with a domain-adapted reward model."""

from .core import EvalBundle, pair_rows, validate_bundle
from .estimators import estimate_lift_dm, estimate_lift_ips, rec_aggregate, recovery
from .propensity import WeightTable, clip_weights, estimate_weights, oracle_weights
from .reward_model import RewardModel, TrainConfig, predict, sample_weight, train
from .sim import SimConfig, exact_true_lift, simulate

__all__ = [
    "EvalBundle",
    "RewardModel",
    "SimConfig",
    "TrainConfig",
    "WeightTable",
    "clip_weights",
    "estimate_lift_dm",
    "estimate_lift_ips",
    "estimate_weights",
    "exact_true_lift",
    "oracle_weights",
    "pair_rows",
    "predict",
    "rec_aggregate",
    "recovery",
    "sample_weight",
    "simulate",
    "train",
    "validate_bundle",
]

__version__ = "0.1.0"
