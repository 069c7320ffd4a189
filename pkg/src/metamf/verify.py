"""Finite-difference self-check on a tiny model, used by ``metamf verify``."""
from __future__ import annotations

from .device import DeviceState, local_gradient, local_loss
from .gradcheck import gradients_agree, max_relative_error, numeric_gradient
from .metanet import ModelDims, backprop_to_theta, generate_model, init_params

TINY = dict(num_users=2, num_items=3, user_dim=2, item_dim=2, memory_dim=2, rank=1,
            hidden_dim=2, layer_sizes=(2, 1))
BATCH = [(0, 4.0), (2, 1.5)]


def run_gradient_checks(seed: int = 0, h: float = 1e-6):
    """Return ``(name, passed, max_rel_err)`` for device and server gradients of each variant."""
    results = []
    for variant in ("full", "si", "sm"):
        theta = init_params(ModelDims(variant=variant, **TINY), seed)
        user = 1
        phi, tape = generate_model(theta, user)
        state = DeviceState(user, phi)
        grad = local_gradient(state, BATCH)

        pairs = []
        pairs.append((grad.dense_items(TINY["num_items"]),
                      numeric_gradient(lambda: local_loss(state, BATCH), phi.item_embeddings, h)))
        for (w, b), (dw, db) in zip(phi.layers, grad.layers):
            pairs.append((dw, numeric_gradient(lambda: local_loss(state, BATCH), w, h)))
            pairs.append((db, numeric_gradient(lambda: local_loss(state, BATCH), b, h)))
        results.append(_summarise(f"device/{variant}", pairs))

        def composed():
            return local_loss(DeviceState(user, generate_model(theta, user)[0]), BATCH)

        analytic = backprop_to_theta(theta, tape, user, grad)
        pairs = [(analytic[k], numeric_gradient(composed, theta[k], h)) for k in theta]
        results.append(_summarise(f"server/{variant}", pairs))
    return results


def _summarise(name, pairs):
    ok = all(gradients_agree(a, n) for a, n in pairs)
    err = max(max_relative_error(a, n) for a, n in pairs)
    return name, ok, err
