"""On-device prediction module.

A device only ever sees its own generated model and its own shard. It
computes a mean squared error on a batch of its training ratings and the
gradient of that loss with respect to the generated model, which is what it
uploads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import UserShard
from .exceptions import ShapeError
from .metanet import GeneratedModel, ModelGradient
from .numkernel import relu, relu_backward


@dataclass
class DeviceState:
    user_index: int
    phi: GeneratedModel
    shard: UserShard | None = None

    def __post_init__(self):
        if self.shard is not None and self.shard.user_index != self.user_index:
            raise ValueError(f"shard belongs to user {self.shard.user_index}, not {self.user_index}")


@dataclass
class LocalGradient(ModelGradient):
    loss: float = 0.0
    batch_size: int = 0


def _as_batch(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        items, ratings = batch
    else:
        batch = list(batch)
        items = np.array([b[0] for b in batch], dtype=np.int64)
        ratings = np.array([b[1] for b in batch], dtype=np.float64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if items.size == 0:
        raise ValueError("batch is empty")
    return items, ratings


def _forward(phi: GeneratedModel, items: np.ndarray):
    n = phi.item_embeddings.shape[1]
    if items.min() < 0 or items.max() >= n:
        raise IndexError(f"item index out of range [0, {n})")
    x = phi.item_embeddings[:, items]
    cache = []
    last = len(phi.layers) - 1
    for l, (w, b) in enumerate(phi.layers):
        pre = w @ x + b[:, None]
        cache.append((x, pre))
        x = pre if l == last else relu(pre)
    return x[0], cache


def predict_many(phi: GeneratedModel, items) -> np.ndarray:
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    if items.size == 0:
        return np.zeros(0)
    return _forward(phi, items)[0]


def predict(state: DeviceState, item_index: int) -> float:
    """Rating estimate for one item; the output layer is linear and unclipped."""
    return float(predict_many(state.phi, [item_index])[0])


def local_loss(state: DeviceState, batch) -> float:
    items, ratings = _as_batch(batch)
    err = ratings - _forward(state.phi, items)[0]
    return float(np.mean(err * err))


def local_gradient(state: DeviceState, batch) -> LocalGradient:
    """Gradient of the batch-mean squared error with respect to the generated model.

    Item gradients are returned for the distinct batch items only, sorted by
    item index.
    """
    items, ratings = _as_batch(batch)
    phi = state.phi
    pred, cache = _forward(phi, items)
    err = ratings - pred
    loss = float(np.mean(err * err))
    upstream = (-2.0 / len(items) * err)[None, :]
    layer_grads = [None] * len(phi.layers)
    for l in range(len(phi.layers) - 1, -1, -1):
        x, pre = cache[l]
        if l != len(phi.layers) - 1:
            upstream = relu_backward(pre, upstream)
        w = phi.layers[l][0]
        layer_grads[l] = (upstream @ x.T, upstream.sum(axis=1))
        upstream = w.T @ upstream
    uniq, inverse = np.unique(items, return_inverse=True)
    columns = np.zeros((upstream.shape[0], len(uniq)))
    np.add.at(columns.T, inverse, upstream.T)
    return LocalGradient(uniq, columns, layer_grads, loss=loss, batch_size=len(items))


def evaluate_local(state: DeviceState, chunk: str = "test") -> tuple[float, float, int]:
    """Raw ``(sum |err|, sum err^2, count)`` over one chunk of the device's shard."""
    if state.shard is None:
        raise ValueError("device has no shard")
    items, ratings = state.shard.chunk(chunk)
    if len(items) == 0:
        return 0.0, 0.0, 0
    err = np.asarray(ratings) - predict_many(state.phi, items)
    return float(np.sum(np.abs(err))), float(np.sum(err * err)), int(len(items))


def check_model(phi: GeneratedModel, layer_shapes) -> None:
    if len(phi.layers) != len(layer_shapes):
        raise ShapeError(f"model has {len(phi.layers)} layers, expected {len(layer_shapes)}")
    for (w, b), (f_out, f_in) in zip(phi.layers, layer_shapes):
        if w.shape != (f_out, f_in) or b.shape != (f_out,):
            raise ShapeError(f"layer shapes {w.shape}/{b.shape}, expected ({f_out}, {f_in})")
