# -*- coding: utf-8 -*-
import numpy as np
import pytest

from app.domain.models import LayeredModel, LayerParams, LayerShape, LoraAdapter
from app.engine.lora import (
    ModelError,
    adapter_segment,
    base_checksum,
    build_model,
    effective_weight,
    flatten_layer,
    forward,
    get_adapters,
    init_optimizer,
    loss_and_grads,
    mse,
    optimizer_step,
    predict,
    set_adapters,
    unflatten_layer,
)
from app.harness.selftest import finite_difference_error


def _layer(w, b, a, bb, alpha=1.0, activation="linear"):
    return LayerParams(
        W=np.array(w, dtype=float),
        b=np.array(b, dtype=float),
        adapter=LoraAdapter(A=np.array(a, dtype=float), B=np.array(bb, dtype=float), alpha=alpha),
        activation=activation,
    )


def test_effective_weight_examples():
    layer = _layer(np.zeros((2, 2)), [0, 0], [[1, 0]], [[2], [0]])
    np.testing.assert_array_equal(effective_weight(layer), [[2.0, 0.0], [0.0, 0.0]])

    w = [[1.0, 2.0], [3.0, 4.0]]
    assert np.array_equal(effective_weight(_layer(w, [0, 0], [[0, 0]], [[5], [6]])), np.array(w))
    assert np.array_equal(effective_weight(_layer(w, [0, 0], [[1, 1]], [[0], [0]])), np.array(w))


def test_zero_input_gives_zero_output_with_tanh():
    model = build_model(3, 4, 2, 2, 1, seed=0)
    layers = [
        LayerParams(W=layer.W, b=np.zeros(4), adapter=layer.adapter, activation="tanh") for layer in model.layers
    ]
    model = LayeredModel(input_map=model.input_map, layers=layers, head=model.head)
    np.testing.assert_array_equal(predict(model, np.zeros((2, 2))), np.zeros((2, 2)))


def test_identity_layer_without_residual_passes_input_through():
    layer = _layer(np.eye(3), np.zeros(3), [[0, 0, 0]], [[0], [0], [0]])
    model = LayeredModel(input_map=np.eye(3), layers=[layer], head=np.eye(3), residual=False)
    x = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_array_equal(predict(model, x), x)


def test_forward_matches_loop_oracle():
    model = build_model(2, 3, 2, 2, 1, seed=0)
    for layer in model.layers:
        layer.adapter.B = np.full(layer.adapter.B.shape, 0.2)
    x = np.array([[0.1, -0.4], [1.5, 0.3]])
    out = predict(model, x)
    for n in range(x.shape[0]):
        h = [sum(model.input_map[i, j] * x[n, j] for j in range(2)) for i in range(3)]
        for layer in model.layers:
            w = effective_weight(layer)
            z = [sum(w[i, j] * h[j] for j in range(3)) + layer.b[i] for i in range(3)]
            h = [h[i] + np.tanh(z[i]) for i in range(3)]
        y = [sum(model.head[i, j] * h[j] for j in range(3)) for i in range(2)]
        np.testing.assert_allclose(out[n], y, rtol=0, atol=1e-12)


def test_forward_rejects_dimension_mismatch():
    model = build_model(2, 3, 2, 2, 1, seed=0)
    with pytest.raises(ModelError, match="dimension mismatch"):
        forward(model, np.zeros((1, 5)))


def test_perfect_fit_has_zero_loss_and_gradients(small_model):
    x = np.random.default_rng(0).normal(size=(6, 3))
    loss, grads = loss_and_grads(small_model, x, predict(small_model, x))
    assert loss == 0.0
    assert all(not g.A.any() and not g.B.any() for g in grads)


@pytest.mark.parametrize("residual", [True, False])
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed, residual):
    rng = np.random.default_rng(100 + seed)
    model = build_model(3, 4, 3, 2, 2, residual=residual, seed=seed)
    for layer in model.layers:
        layer.adapter.B = rng.normal(0.0, 0.3, size=layer.adapter.B.shape)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))
    assert finite_difference_error(model, x, y, h=1e-5) <= 1e-4


def test_batch_replication_leaves_gradients_unchanged(small_model):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(4, 2))
    loss1, g1 = loss_and_grads(small_model, x, y)
    loss2, g2 = loss_and_grads(small_model, np.vstack([x, x]), np.vstack([y, y]))
    assert loss1 == pytest.approx(loss2)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a.A, b.A, atol=1e-14)
        np.testing.assert_allclose(a.B, b.B, atol=1e-14)


def test_empty_batch_is_an_error(small_model):
    with pytest.raises(ModelError, match="empty batch"):
        loss_and_grads(small_model, np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(ModelError, match="empty batch"):
        loss_and_grads(small_model, [], [])


def test_zero_gradient_step_keeps_parameters(small_model):
    state = init_optimizer(small_model, lr=0.1)
    x = np.random.default_rng(0).normal(size=(3, 3))
    _, grads = loss_and_grads(small_model, x, predict(small_model, x))
    stepped, _ = optimizer_step(state, small_model, grads)
    for a, b in zip(get_adapters(small_model), get_adapters(stepped)):
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_single_adamw_step_closed_form(small_model):
    lr, eps = 1e-2, 1e-8
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))
    _, grads = loss_and_grads(small_model, x, y)
    stepped, state = optimizer_step(init_optimizer(small_model, lr=lr, eps=eps), small_model, grads)
    assert state.step == 1
    for before, after, g in zip(small_model.layers, stepped.layers, grads):
        np.testing.assert_allclose(after.adapter.A - before.adapter.A, -lr * g.A / (np.abs(g.A) + eps), atol=1e-12)
        np.testing.assert_allclose(after.adapter.B - before.adapter.B, -lr * g.B / (np.abs(g.B) + eps), atol=1e-12)


def test_optimizer_step_is_deterministic_and_pure(small_model):
    x = np.random.default_rng(4).normal(size=(5, 3))
    y = np.zeros((5, 2))
    _, grads = loss_and_grads(small_model, x, y)
    state = init_optimizer(small_model, lr=1e-3)
    before = get_adapters(small_model)
    m1, s1 = optimizer_step(state, small_model, grads)
    m2, s2 = optimizer_step(state, small_model, grads)
    for (a1, b1), (a2, b2) in zip(get_adapters(m1), get_adapters(m2)):
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    for (a0, b0), (a, b) in zip(before, get_adapters(small_model)):
        assert np.array_equal(a0, a) and np.array_equal(b0, b)
    assert state.step == 0 and s1.step == s2.step == 1


def test_training_never_touches_base_weights(small_model):
    checksum = base_checksum(small_model)
    x = np.random.default_rng(5).normal(size=(8, 3))
    y = np.random.default_rng(6).normal(size=(8, 2))
    model, state = small_model, init_optimizer(small_model, lr=1e-2)
    for _ in range(3):
        _, grads = loss_and_grads(model, x, y)
        model, state = optimizer_step(state, model, grads)
    assert base_checksum(model) == checksum
    assert mse(model, x, y) < mse(small_model, x, y)
    with pytest.raises(ValueError):
        model.layers[0].W[0, 0] = 1.0


def test_flatten_known_layer():
    layer = _layer([[1, 2], [3, 4]], [5, 6], [[7, 8]], [[9], [10]])
    np.testing.assert_array_equal(flatten_layer(layer), np.arange(1.0, 11.0))


def test_flatten_round_trip_is_bitwise(small_model):
    for layer in small_model.layers:
        back = unflatten_layer(flatten_layer(layer), layer.shape)
        assert np.array_equal(back.W, layer.W) and np.array_equal(back.b, layer.b)
        assert np.array_equal(back.adapter.A, layer.adapter.A) and np.array_equal(back.adapter.B, layer.adapter.B)
        assert back.adapter.alpha == layer.adapter.alpha


def test_adapter_change_only_moves_adapter_segment(small_model):
    layer = small_model.layers[0]
    other = layer.copy()
    other.adapter.B = other.adapter.B + 1.0
    diff = np.flatnonzero(flatten_layer(layer) != flatten_layer(other))
    seg = adapter_segment(layer.shape)
    assert diff.min() >= seg.start and diff.max() < seg.stop


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ModelError, match="does not match"):
        unflatten_layer(np.zeros(9), LayerShape(d_in=2, d_out=2, rank=1, alpha=1.0))


def test_set_adapters_checks_arity(small_model):
    with pytest.raises(ModelError, match="arity"):
        set_adapters(small_model, get_adapters(small_model)[:-1])
