"""Dense numeric primitives: products, activations, initialisation, Adam.

Matrices are plain C-ordered float64 ``numpy.ndarray`` objects; vectors are
1-D arrays. Every gradient in the package is assembled from these pieces by
hand, there is no autodiff.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError

DTYPE = np.float64

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def as_rng(seed) -> np.random.Generator:
    """Return a Generator for an int seed, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(root: int, *path: int) -> np.random.SeedSequence:
    """Independent, reproducible child stream for ``(root, *path)``."""
    return np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, *map(int, path)])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs arrays, got shapes {a.shape} and {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``relu`` at pre-activation ``x`` given the upstream gradient.

    The subgradient at exactly zero is taken to be 0.
    """
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_backward shape mismatch: {x.shape} vs {upstream.shape}")
    return np.where(x > 0, upstream, 0.0)


def xavier_bound(rows: int, cols: int) -> float:
    return float(np.sqrt(6.0 / (rows + cols)))


def xavier_init(rows: int, cols: int, seed) -> np.ndarray:
    """Glorot-uniform matrix of shape ``(rows, cols)``.

    ``seed`` may be an int or a ``numpy.random.Generator``; passing a generator
    advances it, which is how several parameters are drawn from one stream.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dimensions, got ({rows}, {cols})")
    bound = xavier_bound(rows, cols)
    return as_rng(seed).uniform(-bound, bound, size=(rows, cols)).astype(DTYPE, copy=False)


@dataclass
class AdamState:
    """Moment estimates for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 1e-4
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = EPSILON
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray, learning_rate: float = 1e-4) -> "AdamState":
        return cls(np.zeros_like(param, dtype=DTYPE), np.zeros_like(param, dtype=DTYPE),
                   learning_rate=learning_rate)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update, applied to ``param`` in place.

    Returns ``(param, state)``; the moments in ``state`` are updated in place.
    """
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ShapeError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}")
    state.step += 1
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** state.step)
    denom = v / (1.0 - state.beta2 ** state.step)
    np.sqrt(denom, out=denom)
    denom += state.epsilon
    m_hat /= denom
    m_hat *= state.learning_rate
    param -= m_hat
    return param, state
