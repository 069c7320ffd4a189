"""scikit-learn style front end.

``MetaMFRegressor`` takes ``X`` as an ``(n_samples, 2)`` array of raw
``(user_id, item_id)`` pairs and ``y`` as ratings. ``fit`` runs the federated
simulation: every user becomes a device holding their own rows of ``X``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .dataset import RatingsTable, SplitConfig, split_per_user
from .device import predict_many
from .fedruntime import TrainConfig, global_evaluate, init_server, make_devices, train
from .metanet import GeneratedModel, ModelDims, generate_model


def _check_pairs(X):
    X = check_array(X, dtype=None, ensure_all_finite=False)
    if X.shape[1] != 2:
        raise ValueError(f"X must have two columns (user_id, item_id), got {X.shape[1]}")
    return X


def _key(v):
    # numpy scalars and numeric strings share a lookup key with the raw ids
    v = v.item() if hasattr(v, "item") else v
    return str(v)


class MetaMFRegressor(RegressorMixin, BaseEstimator):
    """Federated meta matrix factorisation as a regressor.

    Parameters
    ----------
    user_dim, item_dim : int
        Sizes of user and item embeddings.
    memory_dim : int
        Size of the memory basis vectors and of the collaborative vector.
    rank : int
        Inner size of the factorised item embedding generator.
    hidden_dim : int
        Hidden size of every generator.
    layer_sizes : tuple of int
        Output sizes of the generated MLP's layers; the last must be 1.
    variant : {"full", "si", "sm"}
        ``si`` shares one item embedding matrix across users, ``sm`` shares
        one MLP.
    validation_fraction : float
        Per-user fraction of ratings held out for early stopping. With 0 the
        run lasts exactly ``max_rounds`` rounds.
    random_state : int
        Root seed for initialisation, splitting and sampling.
    """

    def __init__(self, user_dim=32, item_dim=32, memory_dim=128, rank=8, hidden_dim=512,
                 layer_sizes=(8, 1), variant="full", learning_rate=1e-4, reg_lambda=1e-3,
                 users_per_round=64, ratings_per_user=32, max_rounds=20000, eval_every=50,
                 patience=10, validation_fraction=0.1, min_ratings=1, n_workers=1, random_state=0):
        self.user_dim = user_dim
        self.item_dim = item_dim
        self.memory_dim = memory_dim
        self.rank = rank
        self.hidden_dim = hidden_dim
        self.layer_sizes = layer_sizes
        self.variant = variant
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.users_per_round = users_per_round
        self.ratings_per_user = ratings_per_user
        self.max_rounds = max_rounds
        self.eval_every = eval_every
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.min_ratings = min_ratings
        self.n_workers = n_workers
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(users_per_round=self.users_per_round, ratings_per_user=self.ratings_per_user,
                           learning_rate=self.learning_rate, reg_lambda=self.reg_lambda,
                           max_rounds=self.max_rounds, patience=self.patience,
                           eval_every=self.eval_every, variant=self.variant,
                           seed=int(self.random_state or 0), n_workers=self.n_workers)

    def fit(self, X, y):
        X = _check_pairs(X)
        y = column_or_1d(y, warn=True).astype(np.float64)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains NaN or infinity")
        table = RatingsTable.from_triples((_key(u), _key(i), r) for (u, i), r in zip(X, y))
        cfg = self._train_config()
        vf = float(self.validation_fraction)
        split = split_per_user(table, SplitConfig(1.0 - vf, vf, 0.0, seed=cfg.seed,
                                                  min_ratings=self.min_ratings))
        dims = ModelDims(num_users=table.num_users, num_items=table.num_items, user_dim=self.user_dim,
                         item_dim=self.item_dim, memory_dim=self.memory_dim, rank=self.rank,
                         hidden_dim=self.hidden_dim, layer_sizes=tuple(self.layer_sizes),
                         variant=self.variant)
        devices = make_devices(split.shards, cfg)
        server = init_server(dims, cfg, devices)
        server, log = train(server, devices)
        self.server_ = server
        self.theta_ = server.theta
        self.log_ = log
        self.n_rounds_ = server.round
        self.user_ids_ = table.user_ids
        self.item_ids_ = table.item_ids
        self._user_pos = {u: k for k, u in enumerate(table.user_ids)}
        self._item_pos = {v: k for k, v in enumerate(table.item_ids)}
        self.n_features_in_ = 2
        return self

    def _indices(self, values, lookup, kind):
        try:
            return np.array([lookup[_key(v)] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown {kind} id {exc.args[0]!r}; the model only knows ids seen in fit") from None

    def user_model(self, user_id) -> GeneratedModel:
        """The private model generated for ``user_id``."""
        check_is_fitted(self, "theta_")
        u = self._indices([user_id], self._user_pos, "user")[0]
        return generate_model(self.theta_, int(u))[0]

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = _check_pairs(X)
        users = self._indices(X[:, 0], self._user_pos, "user")
        items = self._indices(X[:, 1], self._item_pos, "item")
        out = np.empty(len(X))
        for u in np.unique(users):
            mask = users == u
            phi = generate_model(self.theta_, int(u))[0]
            out[mask] = predict_many(phi, items[mask])
        return out
