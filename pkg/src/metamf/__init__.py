"""Federated meta matrix factorisation for rating prediction."""
from .dataset import RatingsTable, SplitConfig, UserShard, load_ratings, split_per_user
from .estimator import MetaMFRegressor
from .fedruntime import TrainConfig, TrainLog, global_evaluate, init_server, make_devices, run_round, train
from .metanet import GeneratedModel, MetaParams, ModelDims, backprop_to_theta, generate_model, init_params

__version__ = "0.1.0"

__all__ = [
    "GeneratedModel", "MetaMFRegressor", "MetaParams", "ModelDims", "RatingsTable", "SplitConfig",
    "TrainConfig", "TrainLog", "UserShard", "backprop_to_theta", "generate_model", "global_evaluate",
    "init_params", "init_server", "load_ratings", "make_devices", "run_round", "split_per_user", "train",
]
