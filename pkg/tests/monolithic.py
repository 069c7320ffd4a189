"""Single-graph reference trainer.

Runs the whole model (generation, prediction, loss, backward, Adam) as one
straight-line computation per user, with no devices, messages or transport.
Its floating point operations are ordered like the federated path so the two
can be compared bit for bit.
"""
import numpy as np

from metamf.dataset import EpochSampler
from metamf.fedruntime import STREAM_RATINGS, STREAM_USERS
from metamf.numkernel import derive_seed


def _relu(x):
    return np.maximum(x, 0.0)


def user_gradient(p, dims, u, items, ratings, acc):
    """Adds d(batch MSE)/d(theta) for user ``u`` into ``acc``; returns the loss."""
    e = p["user_embedding"][:, u].copy()
    c = p["memory"].T @ e
    gen = {}
    if dims.variant != "si":
        pre_l = p["item_low.hidden_weight"] @ c + p["item_low.hidden_bias"]
        h_l = _relu(pre_l)
        low = (p["item_low.out_weight"] @ h_l).reshape(dims.rank, dims.num_items)
        pre_r = p["item_rise.hidden_weight"] @ c + p["item_rise.hidden_bias"]
        h_r = _relu(pre_r)
        rise = (p["item_rise.out_weight"] @ h_r).reshape(dims.item_dim, dims.rank)
        emb = rise @ low
    else:
        emb = p["shared_items"].copy()
    layers = []
    for l, (f_out, f_in) in enumerate(dims.layer_shapes, start=1):
        if dims.variant != "sm":
            q = f"layer{l}."
            pre = p[q + "hidden_weight"] @ c + p[q + "hidden_bias"]
            h = _relu(pre)
            gen[l] = (pre, h)
            w = (p[q + "weight_proj"] @ h + p[q + "weight_bias"]).reshape(f_out, f_in)
            b = p[q + "bias_proj"] @ h + p[q + "bias_bias"]
        else:
            w, b = p[f"shared_layer{l}.weight"].copy(), p[f"shared_layer{l}.bias"].copy()
        layers.append((w, b))

    x = emb[:, items]
    acts = []
    for l, (w, b) in enumerate(layers):
        pre = w @ x + b[:, None]
        acts.append((x, pre))
        x = pre if l == len(layers) - 1 else _relu(pre)
    err = ratings - x[0]
    loss = float(np.mean(err * err))

    up = (-2.0 / len(items) * err)[None, :]
    d_layers = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        xin, pre = acts[l]
        if l != len(layers) - 1:
            up = np.where(pre > 0, up, 0.0)
        d_layers[l] = (up @ xin.T, up.sum(axis=1))
        up = layers[l][0].T @ up
    order = np.argsort(items)
    cols = items[order]
    g = up[:, order]

    dc = np.zeros_like(c)
    if dims.variant != "si":
        d_rise = g @ low[:, cols].T
        d_low = rise.T @ g
        rows = (np.arange(dims.rank)[:, None] * dims.num_items + cols[None, :]).ravel()
        flat = d_low.ravel()
        dense = np.zeros((dims.rank * dims.num_items,))
        dense[rows] = flat
        acc["item_low.out_weight"] += np.outer(dense, h_l)
        d_pre = np.where(pre_l > 0, p["item_low.out_weight"][rows].T @ flat, 0.0)
        acc["item_low.hidden_weight"] += np.outer(d_pre, c)
        acc["item_low.hidden_bias"] += d_pre
        dc += p["item_low.hidden_weight"].T @ d_pre
        rflat = d_rise.ravel()
        acc["item_rise.out_weight"] += np.outer(rflat, h_r)
        d_pre = np.where(pre_r > 0, p["item_rise.out_weight"].T @ rflat, 0.0)
        acc["item_rise.hidden_weight"] += np.outer(d_pre, c)
        acc["item_rise.hidden_bias"] += d_pre
        dc += p["item_rise.hidden_weight"].T @ d_pre
    else:
        acc["shared_items"][:, cols] += g
    for l, (dw, db) in enumerate(d_layers, start=1):
        if dims.variant == "sm":
            acc[f"shared_layer{l}.weight"] += dw
            acc[f"shared_layer{l}.bias"] += db
            continue
        q = f"layer{l}."
        pre, h = gen[l]
        acc[q + "weight_proj"] += np.outer(dw.ravel(), h)
        acc[q + "weight_bias"] += dw.ravel()
        acc[q + "bias_proj"] += np.outer(db, h)
        acc[q + "bias_bias"] += db
        d_pre = np.where(pre > 0, p[q + "weight_proj"].T @ dw.ravel() + p[q + "bias_proj"].T @ db, 0.0)
        acc[q + "hidden_weight"] += np.outer(d_pre, c)
        acc[q + "hidden_bias"] += d_pre
        dc += p[q + "hidden_weight"].T @ d_pre
    acc["memory"] += np.outer(e, dc)
    acc["user_embedding"][:, u] += p["memory"] @ dc
    return loss


class MonolithicTrainer:
    """Same seeds, batches and reduction order as the federated runtime."""

    def __init__(self, theta, shards, config):
        self.dims = theta.dims
        self.p = {k: v.copy() for k, v in theta.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.p.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.p.items()}
        self.t = 0
        self.cfg = config
        self.shards = {s.user_index: s for s in shards}
        users = sorted(self.shards)
        self.user_sampler = EpochSampler(np.asarray(users), min(config.users_per_round, len(users)),
                                         derive_seed(config.seed, STREAM_USERS))
        self.rating_samplers = {
            u: EpochSampler(np.arange(len(s.train[0])), min(config.ratings_per_user, len(s.train[0])),
                            derive_seed(config.seed, STREAM_RATINGS, u))
            for u, s in self.shards.items()}

    def step(self):
        users = sorted(int(u) for u in self.user_sampler.next_batch())
        acc = {k: np.zeros_like(v) for k, v in self.p.items()}
        for u in users:
            idx = self.rating_samplers[u].next_indices()
            items, ratings = self.shards[u].train[0][idx], self.shards[u].train[1][idx]
            user_gradient(self.p, self.dims, u, items, ratings, acc)
        self.t += 1
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, self.cfg.learning_rate
        for k in self.p:
            g = acc[k] / len(users) + self.cfg.reg_lambda * self.p[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            m_hat = self.m[k] / (1.0 - b1 ** self.t)
            denom = np.sqrt(self.v[k] / (1.0 - b2 ** self.t)) + eps
            self.p[k] = self.p[k] - (m_hat / denom) * lr
