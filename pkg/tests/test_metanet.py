import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, TINY
from metamf.device import DeviceState, local_gradient, local_loss
from metamf.exceptions import CapacityError, ShapeError, TapeMismatchError
from metamf.gradcheck import gradients_agree, numeric_gradient
from metamf.metanet import (GenerationTape, ModelDims, ModelGradient, backprop_to_theta, collaborative_vector,
                            embed_user, expected_shapes, generate_item_embeddings, generate_model,
                            generate_rp_layer, init_params, regularization)


def test_embed_user_identity_and_zero():
    theta = init_params(ModelDims(num_users=3, num_items=2, user_dim=3, memory_dim=2, hidden_dim=2,
                                  item_dim=2, rank=1, layer_sizes=(1,)), 0)
    theta["user_embedding"] = np.eye(3)
    np.testing.assert_array_equal(embed_user(theta, 1), [0, 1, 0])
    theta["user_embedding"] = np.zeros((3, 3))
    np.testing.assert_array_equal(embed_user(theta, 2), 0)
    with pytest.raises(IndexError):
        embed_user(theta, 3)


def test_embed_user_equals_one_hot_product(small_theta):
    m = small_theta.dims.num_users
    for u in range(m):
        one_hot = np.zeros(m)
        one_hot[u] = 1.0
        np.testing.assert_array_equal(embed_user(small_theta, u), small_theta["user_embedding"] @ one_hot)


def test_collaborative_vector_examples(tiny_dims):
    theta = init_params(tiny_dims, 0)
    theta["memory"] = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(collaborative_vector(theta, np.array([1.0, 1.0])), [1.0, 2.0])
    np.testing.assert_array_equal(collaborative_vector(theta, np.array([0.0, 1.0])), [0.0, 2.0])
    with pytest.raises(ShapeError):
        collaborative_vector(theta, np.ones(3))


def test_collaborative_vector_is_weighted_row_sum_and_linear(small_theta):
    rng = np.random.default_rng(0)
    e = rng.normal(size=small_theta.dims.user_dim)
    mem = small_theta["memory"]
    direct = sum(mem[i, :] * e[i] for i in range(mem.shape[0]))
    np.testing.assert_allclose(collaborative_vector(small_theta, e), direct, rtol=1e-12)
    np.testing.assert_allclose(collaborative_vector(small_theta, 2.5 * e),
                               2.5 * collaborative_vector(small_theta, e), rtol=1e-12)


def test_zero_generators_give_zero_items():
    theta = init_params(ModelDims(**SMALL), 0)
    for k in theta:
        if k.startswith(("item_low", "item_rise")):
            theta[k] = np.zeros_like(theta[k])
    c = collaborative_vector(theta, embed_user(theta, 0))
    np.testing.assert_array_equal(generate_item_embeddings(theta, c), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(4, 9), st.integers(4, 12), st.integers(0, 1000))
def test_item_embeddings_rank_at_most_rank(rank, item_dim, num_items, seed):
    dims = ModelDims(num_users=2, num_items=num_items, user_dim=3, item_dim=item_dim, memory_dim=4,
                     rank=rank, hidden_dim=5, layer_sizes=(1,))
    theta = init_params(dims, seed)
    items, _ = generate_model(theta, 1)
    assert items.item_embeddings.shape == (item_dim, num_items)
    assert np.linalg.matrix_rank(items.item_embeddings) <= rank


def test_factorised_output_size():
    dims = ModelDims(num_users=1, num_items=100, item_dim=32, rank=8)
    assert dims.generated_output_size() == 8 * 100 + 32 * 8 == 1056
    assert dims.direct_output_size() == 3200


def test_layer_from_bias_only(small_theta):
    if small_theta.dims.variant == "sm":
        pytest.skip("shared layers are not generated")
    f_out, f_in = small_theta.dims.layer_shapes[0]
    v = np.arange(f_out * f_in, dtype=float)
    small_theta["layer1.weight_proj"][:] = 0.0
    small_theta["layer1.weight_bias"][:] = v
    for u in range(small_theta.dims.num_users):
        c = collaborative_vector(small_theta, embed_user(small_theta, u))
        w, _ = generate_rp_layer(small_theta, c, 1)
        np.testing.assert_array_equal(w, v.reshape(f_out, f_in))


def test_layer_depends_only_on_collab(small_theta):
    c = np.linspace(-1, 1, small_theta.dims.memory_dim)
    w1, b1 = generate_rp_layer(small_theta, c, 2)
    w2, b2 = generate_rp_layer(small_theta, c.copy(), 2)
    np.testing.assert_array_equal(w1, w2)
    np.testing.assert_array_equal(b1, b2)
    with pytest.raises(IndexError):
        generate_rp_layer(small_theta, c, 4)


def test_layer_jacobian_vector_product():
    theta = init_params(ModelDims(**SMALL), 5)
    rng = np.random.default_rng(1)
    c = rng.normal(size=theta.dims.memory_dim)
    direction = rng.normal(size=c.shape)
    f_out, f_in = theta.dims.layer_shapes[0]
    pre = theta["layer1.hidden_weight"] @ c + theta["layer1.hidden_bias"]
    analytic = (theta["layer1.weight_proj"] @ ((pre > 0) * (theta["layer1.hidden_weight"] @ direction))
                ).reshape(f_out, f_in)
    h = 1e-6
    numeric = (generate_rp_layer(theta, c + h * direction, 1)[0]
               - generate_rp_layer(theta, c - h * direction, 1)[0]) / (2 * h)
    assert gradients_agree(analytic, numeric)


def test_default_model_size():
    dims = ModelDims(num_users=3, num_items=50)
    theta = init_params(dims, 0)
    phi, _ = generate_model(theta, 0)
    mlp = sum(w.size + b.size for w, b in phi.layers)
    assert mlp == 8 * 32 + 8 + 1 * 8 + 1 == 273
    assert phi.num_parameters == dims.model_size() == 273 + 32 * 50


def test_generation_deterministic_and_user_specific(small_theta):
    a, _ = generate_model(small_theta, 2)
    b, _ = generate_model(small_theta, 2)
    c, _ = generate_model(small_theta, 3)
    np.testing.assert_array_equal(a.item_embeddings, b.item_embeddings)
    variant = small_theta.dims.variant
    items_equal = np.array_equal(a.item_embeddings, c.item_embeddings)
    layers_equal = all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1])
                       for x, y in zip(a.layers, c.layers))
    assert items_equal == (variant == "si")
    assert layers_equal == (variant == "sm")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 7), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5),
       st.integers(1, 3), st.integers(1, 6), st.lists(st.integers(1, 4), max_size=2),
       st.sampled_from(["full", "si", "sm"]))
def test_shape_audit(m, n, du, di, k, s, o, hidden, variant):
    dims = ModelDims(num_users=m, num_items=n, user_dim=du, item_dim=di, memory_dim=k, rank=s,
                     hidden_dim=o, layer_sizes=(*hidden, 1), variant=variant)
    theta = init_params(dims, 0)
    theta.check_shapes()
    if variant != "si":
        assert theta["item_low.out_weight"].shape == (s * n, o)
        assert theta["item_rise.out_weight"].shape == (di * s, o)
    phi, _ = generate_model(theta, m - 1)
    assert phi.item_embeddings.shape == (di, n)
    f_in = di
    for (w, b), f_out in zip(phi.layers, dims.layer_sizes):
        assert w.shape == (f_out, f_in) and b.shape == (f_out,)
        f_in = f_out
    assert phi.num_parameters == dims.model_size()


def test_layer_generators_are_not_shared():
    shapes = expected_shapes(ModelDims(**SMALL))
    assert {f"layer{l}.hidden_weight" for l in (1, 2, 3)} <= set(shapes)


def test_capacity_guard():
    with pytest.raises(CapacityError):
        ModelDims(num_users=1, num_items=10**6, item_dim=32, memory_budget=64 * 2**20)


def zero_gradient(dims):
    return ModelGradient.from_dense(np.zeros((dims.item_dim, dims.num_items)),
                                    [(np.zeros(s), np.zeros(s[0])) for s in dims.layer_shapes])


def test_zero_upstream_gives_zero_gradient(small_theta):
    _, tape = generate_model(small_theta, 1)
    grads = backprop_to_theta(small_theta, tape, 1, zero_gradient(small_theta.dims))
    assert all(not np.any(g) for g in grads.values())


def test_tape_mismatch(small_theta):
    _, tape = generate_model(small_theta, 1)
    with pytest.raises(TapeMismatchError):
        backprop_to_theta(small_theta, tape, 2, zero_gradient(small_theta.dims))


BATCH = [(0, 4.0), (2, 1.5)]


def composed_loss(theta, user, batch):
    phi, _ = generate_model(theta, user)
    return local_loss(DeviceState(user, phi), batch)


def theta_gradient(theta, user, batch, out=None):
    phi, tape = generate_model(theta, user)
    return backprop_to_theta(theta, tape, user, local_gradient(DeviceState(user, phi), batch), out=out)


@pytest.mark.parametrize("user", [0, 1])
def test_backprop_matches_finite_differences_tiny(tiny_theta, user):
    analytic = theta_gradient(tiny_theta, user, BATCH)
    for name in tiny_theta:
        numeric = numeric_gradient(lambda: composed_loss(tiny_theta, user, BATCH), tiny_theta[name])
        assert gradients_agree(analytic[name], numeric), name


def test_backprop_matches_finite_differences_small(small_theta):
    batch = [(1, 2.0), (5, 4.5), (7, 3.0)]
    analytic = theta_gradient(small_theta, 4, batch)
    for name in small_theta:
        numeric = numeric_gradient(lambda: composed_loss(small_theta, 4, batch), small_theta[name])
        assert gradients_agree(analytic[name], numeric), name


def test_accumulation_over_users_is_additive(small_theta):
    b0, b1 = [(0, 3.0), (3, 1.0)], [(3, 5.0), (6, 2.0)]
    acc = theta_gradient(small_theta, 0, b0)
    theta_gradient(small_theta, 1, b1, out=acc)
    separate = [theta_gradient(small_theta, 0, b0), theta_gradient(small_theta, 1, b1)]
    for name in small_theta:
        np.testing.assert_allclose(acc[name], separate[0][name] + separate[1][name], rtol=1e-12, atol=1e-15)
        numeric = numeric_gradient(lambda: composed_loss(small_theta, 0, b0) + composed_loss(small_theta, 1, b1),
                                   small_theta[name])
        assert gradients_agree(acc[name], numeric), name


def test_regularization_values(tiny_dims):
    theta = init_params(tiny_dims, 0)
    for k in theta:
        theta[k] = np.zeros_like(theta[k])
    value, grads = regularization(theta, 0.1)
    assert value == 0.0 and all(not np.any(g) for g in grads.values())
    theta["memory"][0, 0] = 3.0
    value, grads = regularization(theta, 0.1)
    assert value == 4.5
    assert grads["memory"][0, 0] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        regularization(theta, -1.0)


def test_regularization_gradient_finite_differences(small_theta):
    lam = 0.01
    _, grads = regularization(small_theta, lam)
    for name in ("memory", "user_embedding"):
        numeric = numeric_gradient(lambda: lam * regularization(small_theta, lam)[0], small_theta[name])
        assert gradients_agree(grads[name], numeric)
