# -*- coding: utf-8 -*-
import numpy as np
import pytest
from hypothesis import given, strategies as st

from app.domain.models import GroupPartition, LayeredModel, LayerShape
from app.engine.fusion import (
    FusionError,
    build_submodel,
    fuse_group,
    fuse_vectors,
    fusion_strategy,
    layer_add,
    layer_sub,
)
from app.engine.lora import build_model, flatten_layer, model_checksum, unflatten_layer
from app.harness.selftest import fusion_oracle

SHAPE = LayerShape(d_in=1, d_out=1, rank=1, alpha=1.0, activation="linear")

vectors = st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3).map(np.array)


def _layers(*vecs):
    return [unflatten_layer(np.array(v, dtype=float), SHAPE) for v in vecs]


def test_layer_arithmetic_examples():
    np.testing.assert_array_equal(layer_add([1, 2], [3, -1]), [4, 1])
    np.testing.assert_array_equal(layer_add([1, 2], [0, 0]), [1, 2])
    np.testing.assert_array_equal(layer_sub([4, 1], [3, -1]), [1, 2])
    np.testing.assert_array_equal(layer_sub([4, 1], [4, 1]), [0, 0])
    with pytest.raises(FusionError, match="length mismatch"):
        layer_add([1, 2], [1, 2, 3])


@given(vectors, vectors)
def test_layer_add_commutes_and_inverts(a, b):
    assert np.array_equal(layer_add(a, b), layer_add(b, a))
    np.testing.assert_allclose(layer_add(layer_sub(a, b), b), a, rtol=1e-12, atol=1e-6)


def test_fuse_vectors_example():
    np.testing.assert_array_equal(fuse_vectors([np.array([1.0, 0.0]), np.array([3.0, 2.0])], 0.5), [2.0, 1.0])
    with pytest.raises(FusionError, match="empty"):
        fuse_vectors([], 0.5)


def test_fuse_group_identities():
    (single,) = _layers([0.3, -1.0, 2.0, 0.5])
    rep = fuse_group([single], beta=0.7)
    assert np.array_equal(flatten_layer(rep.layer), flatten_layer(single))

    group = _layers([1, 2, 3, 4], [5, 6, 7, 8], [0, 1, 0, 1])
    rep0 = fuse_group(group, beta=0.0)
    assert np.array_equal(flatten_layer(rep0.layer), flatten_layer(group[0]))

    same = _layers([1, 2, 3, 4], [1, 2, 3, 4], [1, 2, 3, 4])
    assert np.array_equal(flatten_layer(fuse_group(same, beta=0.3).layer), np.array([1.0, 2.0, 3.0, 4.0]))


def test_fuse_group_records_origin():
    rep = fuse_group(_layers([1, 0, 0, 0], [3, 2, 0, 0]), beta=0.5, group_id=3)
    np.testing.assert_array_equal(flatten_layer(rep.layer), [2.0, 1.0, 0.0, 0.0])
    assert rep.layer.origin == {"group_id": 3, "beta": 0.5, "strategy": "dblf"}


@pytest.mark.parametrize("trial", range(100))
def test_fuse_group_matches_loop_oracle(trial):
    rng = np.random.default_rng(trial)
    size = int(rng.integers(1, 6))
    beta = float(rng.uniform(0.0, 1.0))
    model = build_model(size, 3, 3, 3, 2, layer_correlation=0.5, seed=trial)
    for layer in model.layers:
        layer.adapter.B = rng.normal(size=layer.adapter.B.shape)
    fused = flatten_layer(fuse_group(model.layers, beta).layer)
    oracle = fusion_oracle([flatten_layer(layer) for layer in model.layers], beta)
    assert np.max(np.abs(fused - oracle)) <= 1e-12


@given(st.floats(0.0, 1.0), st.floats(-3.0, 3.0))
def test_fusion_is_linear_in_members(beta, c):
    rng = np.random.default_rng(0)
    vs = [rng.normal(size=5) for _ in range(3)]
    scaled = fuse_vectors([c * v for v in vs], beta)
    np.testing.assert_allclose(scaled, c * fuse_vectors(vs, beta), atol=1e-9)


def test_sum_and_r_one_strategies():
    (theta,) = _layers([1, 2, 3, 4])
    rep = fusion_strategy([theta], "sum", beta=0.1, seed=0)
    assert np.array_equal(flatten_layer(rep.layer), flatten_layer(theta))

    rep = fusion_strategy(_layers([1, 0, 0, 0], [3, 2, 0, 0]), "sum", beta=0.1, seed=0)
    np.testing.assert_array_equal(flatten_layer(rep.layer), [4.0, 2.0, 0.0, 0.0])
    assert rep.strategy == "sum"

    group = _layers([1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0])
    a = fusion_strategy(group, "r_one", beta=0.1, seed=17)
    b = fusion_strategy(group, "r_one", beta=0.1, seed=17)
    assert np.array_equal(flatten_layer(a.layer), flatten_layer(b.layer))
    assert any(np.array_equal(flatten_layer(a.layer), flatten_layer(m)) for m in group)

    with pytest.raises(FusionError, match="empty"):
        fusion_strategy([], "sum", beta=0.1, seed=0)
    with pytest.raises(FusionError, match="unknown fusion"):
        fusion_strategy(group, "mean", beta=0.1, seed=0)


def test_singleton_submodel_equals_global(small_model):
    sub = build_submodel(small_model, GroupPartition.singletons(small_model.L), beta=0.4)
    assert sub.L == small_model.L
    for a, b in zip(sub.layers, small_model.layers):
        assert np.array_equal(flatten_layer(a), flatten_layer(b))
    assert sub.input_map is small_model.input_map and sub.head is small_model.head


def test_identical_layers_collapse_to_one():
    layers = _layers([1, 2, 3, 4], [1, 2, 3, 4])
    model = LayeredModel(input_map=np.ones((1, 1)), layers=layers, head=np.ones((1, 1)))
    sub = build_submodel(model, GroupPartition(groups=[[0, 1]]), beta=0.9)
    assert sub.L == 1
    assert np.array_equal(flatten_layer(sub.layers[0]), np.array([1.0, 2.0, 3.0, 4.0]))


def test_four_layer_submodel_by_hand():
    layers = _layers([1, 0, 0, 0], [2, 1, 0, 0], [0, 0, 1, 1], [0, 0, 3, 1])
    model = LayeredModel(input_map=np.ones((1, 1)), layers=layers, head=np.ones((1, 1)))
    sub = build_submodel(model, GroupPartition(groups=[[0, 1], [2, 3]]), beta=0.1)
    np.testing.assert_allclose(flatten_layer(sub.layers[0]), [1.1, 0.1, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(flatten_layer(sub.layers[1]), [0.0, 0.0, 1.2, 1.0], atol=1e-15)
    # global model untouched
    np.testing.assert_array_equal(flatten_layer(model.layers[1]), [2.0, 1.0, 0.0, 0.0])


def test_invalid_partition_is_a_fusion_error(small_model):
    with pytest.raises(FusionError, match="invalid partition"):
        build_submodel(small_model, GroupPartition(groups=[[0, 1]]), beta=0.1)


@pytest.mark.parametrize("size", [1, 2, 4])
def test_consensus_group_fusion(size):
    theta = np.array([0.5, -1.5, 2.0, 0.25])
    group = _layers(*[theta] * size)
    summed = fusion_strategy(group, "sum", 0.1, seed=0)
    assert np.array_equal(flatten_layer(summed.layer), size * theta)
    for strategy in ("dblf", "r_one"):
        rep = fusion_strategy(group, strategy, 0.1, seed=3)
        assert np.array_equal(flatten_layer(rep.layer), theta)


@pytest.mark.parametrize("strategy", ["dblf", "sum", "r_one"])
def test_build_submodel_leaves_the_global_model_alone(small_model, strategy):
    before = model_checksum(small_model)
    sub = build_submodel(small_model, GroupPartition(groups=[[0, 2], [1, 3]]), 0.1, strategy, seed=1)
    for layer in sub.layers:
        layer.adapter.A += 1.0
        layer.adapter.B += 1.0
    assert model_checksum(small_model) == before
