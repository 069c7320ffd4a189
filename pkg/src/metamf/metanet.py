"""Server-side meta network.

A user index is mapped to a user embedding, then to a collaborative vector
(a combination of the shared memory rows), and from that vector the network
generates the user's private item embedding matrix and the weights of their
private rating MLP. ``backprop_to_theta`` pulls gradients with respect to the
generated model back onto the trainable server parameters.

Parameter names
---------------
``user_embedding``          (user_dim, num_users)
``memory``                  (user_dim, memory_dim)
``item_low.*``              low-dimensional item factor generator, output (rank * num_items)
``item_rise.*``             rise-dimensional factor generator, output (item_dim * rank)
``layer{l}.*``              generator of MLP layer ``l`` weights and biases
``shared_items``            only in the ``si`` variant, replaces ``item_low``/``item_rise``
``shared_layer{l}.*``       only in the ``sm`` variant, replaces ``layer{l}``
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .exceptions import CapacityError, ShapeError, TapeMismatchError
from .numkernel import DTYPE, as_rng, relu, relu_backward, xavier_init

VARIANTS = ("full", "si", "sm")
DEFAULT_MEMORY_BUDGET = 64 * 2**20


@dataclass(frozen=True)
class ModelDims:
    num_users: int
    num_items: int
    user_dim: int = 32
    item_dim: int = 32
    memory_dim: int = 128
    rank: int = 8
    hidden_dim: int = 512
    layer_sizes: tuple = (8, 1)
    variant: str = "full"
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(x) for x in self.layer_sizes))
        object.__setattr__(self, "variant", str(self.variant).lower())
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        counts = dict(num_users=self.num_users, num_items=self.num_items, user_dim=self.user_dim,
                      item_dim=self.item_dim, memory_dim=self.memory_dim, rank=self.rank,
                      hidden_dim=self.hidden_dim)
        for name, value in counts.items():
            if int(value) < 1:
                raise ShapeError(f"{name} must be >= 1, got {value}")
        if not self.layer_sizes or self.layer_sizes[-1] != 1 or min(self.layer_sizes) < 1:
            raise ShapeError(f"layer_sizes must be positive and end in 1, got {self.layer_sizes}")
        if self.item_dim * self.num_items * np.dtype(DTYPE).itemsize > self.memory_budget:
            raise CapacityError(
                f"item embedding matrix of {self.item_dim} x {self.num_items} doubles exceeds "
                f"the per-user memory budget of {self.memory_budget} bytes")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(f_out, f_in)`` for every MLP layer."""
        fan_in = (self.item_dim, *self.layer_sizes[:-1])
        return list(zip(self.layer_sizes, fan_in))

    @property
    def generates_items(self) -> bool:
        return self.variant != "si"

    @property
    def generates_layers(self) -> bool:
        return self.variant != "sm"

    def generated_output_size(self) -> int:
        """Elements produced by the item generators: ``rank*n + item_dim*rank``."""
        return self.rank * self.num_items + self.item_dim * self.rank

    def direct_output_size(self) -> int:
        return self.item_dim * self.num_items

    def model_size(self) -> int:
        """Parameter count of one generated per-user model."""
        return self.item_dim * self.num_items + sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d


def expected_shapes(dims: ModelDims) -> dict[str, tuple]:
    """Name -> shape of every trainable parameter, in canonical order."""
    o, k = dims.hidden_dim, dims.memory_dim
    shapes = {
        "user_embedding": (dims.user_dim, dims.num_users),
        "memory": (dims.user_dim, k),
    }
    if dims.generates_items:
        shapes.update({
            "item_low.hidden_weight": (o, k),
            "item_low.hidden_bias": (o,),
            "item_low.out_weight": (dims.rank * dims.num_items, o),
            "item_rise.hidden_weight": (o, k),
            "item_rise.hidden_bias": (o,),
            "item_rise.out_weight": (dims.item_dim * dims.rank, o),
        })
    else:
        shapes["shared_items"] = (dims.item_dim, dims.num_items)
    for l, (f_out, f_in) in enumerate(dims.layer_shapes, start=1):
        if dims.generates_layers:
            shapes.update({
                f"layer{l}.hidden_weight": (o, k),
                f"layer{l}.hidden_bias": (o,),
                f"layer{l}.weight_proj": (f_out * f_in, o),
                f"layer{l}.weight_bias": (f_out * f_in,),
                f"layer{l}.bias_proj": (f_out, o),
                f"layer{l}.bias_bias": (f_out,),
            })
        else:
            shapes[f"shared_layer{l}.weight"] = (f_out, f_in)
            shapes[f"shared_layer{l}.bias"] = (f_out,)
    return shapes


@dataclass
class MetaParams:
    """Trainable server parameters: a dims record plus named arrays."""

    dims: ModelDims
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "MetaParams":
        return MetaParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def check_shapes(self) -> None:
        expected = expected_shapes(self.dims)
        if list(expected) != list(self.arrays):
            raise ShapeError(f"parameter names {list(self.arrays)} != expected {list(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")


def init_params(dims: ModelDims, seed) -> MetaParams:
    """Xavier-uniform initialisation of every parameter, biases included.

    Vectors are drawn as single-column matrices. Parameters are drawn in
    canonical order from one stream, so equal seeds give identical bits.
    """
    rng = as_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(dims).items():
        if len(shape) == 1:
            arrays[name] = xavier_init(shape[0], 1, rng)[:, 0].copy()
        else:
            arrays[name] = xavier_init(shape[0], shape[1], rng)
    return MetaParams(dims, arrays)


@dataclass
class GeneratedModel:
    """A user's private model: item embeddings ``(item_dim, n)`` and MLP layers."""

    item_embeddings: np.ndarray
    layers: list

    @property
    def num_parameters(self) -> int:
        return self.item_embeddings.size + sum(w.size + b.size for w, b in self.layers)


@dataclass
class ModelGradient:
    """Gradient with respect to a GeneratedModel.

    Item embedding gradients are kept sparse: ``item_columns[:, j]`` is the
    gradient of column ``item_indices[j]``; all other columns are zero.
    """

    item_indices: np.ndarray
    item_columns: np.ndarray
    layers: list

    def dense_items(self, num_items: int) -> np.ndarray:
        out = np.zeros((self.item_columns.shape[0], num_items), dtype=DTYPE)
        out[:, self.item_indices] = self.item_columns
        return out

    @classmethod
    def from_dense(cls, item_grad: np.ndarray, layers) -> "ModelGradient":
        return cls(np.arange(item_grad.shape[1]), item_grad, list(layers))


@dataclass
class GenerationTape:
    """Intermediates of one ``generate_model`` call, enough to run the backward pass."""

    user_index: int
    user_vector: np.ndarray
    collab: np.ndarray
    item_low: dict = None
    item_rise: dict = None
    layers: list = field(default_factory=list)


def embed_user(theta: MetaParams, user_index: int) -> np.ndarray:
    m = theta.dims.num_users
    if not 0 <= user_index < m:
        raise IndexError(f"user index {user_index} out of range [0, {m})")
    return theta["user_embedding"][:, user_index].copy()


def collaborative_vector(theta: MetaParams, user_vector: np.ndarray) -> np.ndarray:
    """Combine the memory rows with the user's embedding entries as weights."""
    memory = theta["memory"]
    if user_vector.shape != (memory.shape[0],):
        raise ShapeError(f"user vector shape {user_vector.shape}, expected ({memory.shape[0]},)")
    return memory.T @ user_vector


def _hidden(weight, bias, collab):
    pre = weight @ collab + bias
    return pre, relu(pre)


def generate_item_embeddings(theta: MetaParams, collab: np.ndarray, tape: GenerationTape | None = None):
    """Item embeddings as the product of a rise-dimensional and a low-dimensional factor."""
    dims = theta.dims
    if collab.shape != (dims.memory_dim,):
        raise ShapeError(f"collaborative vector shape {collab.shape}, expected ({dims.memory_dim},)")
    if not dims.generates_items:
        return theta["shared_items"].copy()
    pre_l, h_l = _hidden(theta["item_low.hidden_weight"], theta["item_low.hidden_bias"], collab)
    low = (theta["item_low.out_weight"] @ h_l).reshape(dims.rank, dims.num_items)
    pre_r, h_r = _hidden(theta["item_rise.hidden_weight"], theta["item_rise.hidden_bias"], collab)
    rise = (theta["item_rise.out_weight"] @ h_r).reshape(dims.item_dim, dims.rank)
    if tape is not None:
        tape.item_low = {"pre": pre_l, "hidden": h_l, "factor": low}
        tape.item_rise = {"pre": pre_r, "hidden": h_r, "factor": rise}
    return rise @ low


def generate_rp_layer(theta: MetaParams, collab: np.ndarray, layer: int, tape: GenerationTape | None = None):
    """Weights ``(f_out, f_in)`` and bias ``(f_out,)`` of MLP layer ``layer`` (1-based)."""
    dims = theta.dims
    if not 1 <= layer <= len(dims.layer_sizes):
        raise IndexError(f"layer {layer} out of range 1..{len(dims.layer_sizes)}")
    f_out, f_in = dims.layer_shapes[layer - 1]
    if not dims.generates_layers:
        return theta[f"shared_layer{layer}.weight"].copy(), theta[f"shared_layer{layer}.bias"].copy()
    p = f"layer{layer}."
    pre, h = _hidden(theta[p + "hidden_weight"], theta[p + "hidden_bias"], collab)
    weight = (theta[p + "weight_proj"] @ h + theta[p + "weight_bias"]).reshape(f_out, f_in)
    bias = theta[p + "bias_proj"] @ h + theta[p + "bias_bias"]
    if tape is not None:
        tape.layers.append({"pre": pre, "hidden": h})
    return weight, bias


def generate_model(theta: MetaParams, user_index: int) -> tuple[GeneratedModel, GenerationTape]:
    user_vector = embed_user(theta, user_index)
    collab = collaborative_vector(theta, user_vector)
    tape = GenerationTape(user_index, user_vector, collab)
    items = generate_item_embeddings(theta, collab, tape)
    layers = [generate_rp_layer(theta, collab, l, tape) for l in range(1, len(theta.dims.layer_sizes) + 1)]
    return GeneratedModel(items, layers), tape


def _check_gradient(dims: ModelDims, grad: ModelGradient):
    if grad.item_columns.shape != (dims.item_dim, len(grad.item_indices)):
        raise ShapeError(f"item gradient columns {grad.item_columns.shape} do not match "
                         f"{len(grad.item_indices)} indices of dimension {dims.item_dim}")
    if len(grad.layers) != len(dims.layer_shapes):
        raise ShapeError(f"{len(grad.layers)} layer gradients for {len(dims.layer_shapes)} layers")
    for (dw, db), (f_out, f_in) in zip(grad.layers, dims.layer_shapes):
        if dw.shape != (f_out, f_in) or db.shape != (f_out,):
            raise ShapeError(f"layer gradient shapes {dw.shape}, {db.shape}; expected ({f_out}, {f_in})")


def backprop_to_theta(theta: MetaParams, tape: GenerationTape, user_index: int,
                      grad: ModelGradient, out: dict | None = None) -> dict:
    """Vector-Jacobian product of the generation map.

    Adds the gradient with respect to every parameter into ``out`` (a dict of
    zero-initialised arrays is created when omitted) and returns it. Only the
    rows of the low-dimensional factor generator that feed touched item
    columns are updated; the remaining rows receive exact zeros.
    """
    if tape.user_index != user_index:
        raise TapeMismatchError(f"tape was recorded for user {tape.user_index}, not {user_index}")
    dims = theta.dims
    _check_gradient(dims, grad)
    if out is None:
        out = theta.zeros_like()
    cols = np.asarray(grad.item_indices, dtype=np.int64)
    g_items = grad.item_columns
    c = tape.collab
    d_collab = np.zeros_like(c)

    if dims.generates_items:
        low, rise = tape.item_low["factor"], tape.item_rise["factor"]
        d_rise = g_items @ low[:, cols].T
        d_low = rise.T @ g_items
        rows = (np.arange(dims.rank)[:, None] * dims.num_items + cols[None, :]).ravel()
        d_low_flat = d_low.ravel()
        out_w = theta["item_low.out_weight"]
        out["item_low.out_weight"][rows] += np.outer(d_low_flat, tape.item_low["hidden"])
        d_h = out_w[rows].T @ d_low_flat
        d_pre = relu_backward(tape.item_low["pre"], d_h)
        out["item_low.hidden_weight"] += np.outer(d_pre, c)
        out["item_low.hidden_bias"] += d_pre
        d_collab += theta["item_low.hidden_weight"].T @ d_pre

        d_rise_flat = d_rise.ravel()
        out["item_rise.out_weight"] += np.outer(d_rise_flat, tape.item_rise["hidden"])
        d_h = theta["item_rise.out_weight"].T @ d_rise_flat
        d_pre = relu_backward(tape.item_rise["pre"], d_h)
        out["item_rise.hidden_weight"] += np.outer(d_pre, c)
        out["item_rise.hidden_bias"] += d_pre
        d_collab += theta["item_rise.hidden_weight"].T @ d_pre
    else:
        out["shared_items"][:, cols] += g_items

    for l, (d_weight, d_bias) in enumerate(grad.layers, start=1):
        if not dims.generates_layers:
            out[f"shared_layer{l}.weight"] += d_weight
            out[f"shared_layer{l}.bias"] += d_bias
            continue
        p = f"layer{l}."
        rec = tape.layers[l - 1]
        d_flat = d_weight.ravel()
        out[p + "weight_proj"] += np.outer(d_flat, rec["hidden"])
        out[p + "weight_bias"] += d_flat
        out[p + "bias_proj"] += np.outer(d_bias, rec["hidden"])
        out[p + "bias_bias"] += d_bias
        d_h = theta[p + "weight_proj"].T @ d_flat + theta[p + "bias_proj"].T @ d_bias
        d_pre = relu_backward(rec["pre"], d_h)
        out[p + "hidden_weight"] += np.outer(d_pre, c)
        out[p + "hidden_bias"] += d_pre
        d_collab += theta[p + "hidden_weight"].T @ d_pre

    if dims.generates_items or dims.generates_layers:
        out["memory"] += np.outer(tape.user_vector, d_collab)
        out["user_embedding"][:, user_index] += theta["memory"] @ d_collab
    return out


def regularization(theta: MetaParams, lam: float) -> tuple[float, dict]:
    """``0.5 * ||theta||^2`` over all trainable arrays and its gradient scaled by ``lam``."""
    if lam < 0:
        raise ValueError(f"regularization weight must be >= 0, got {lam}")
    value = 0.5 * sum(float(np.sum(v * v)) for v in theta.arrays.values())
    return value, {k: lam * v for k, v in theta.arrays.items()}
