# -*- coding: utf-8 -*-
import numpy as np
import pytest

from app.engine.lora import build_model, mse
from app.harness.tasks import TaskError, _mixture_weights, generate_clients, make_target_task, make_test_set


@pytest.fixture
def model():
    return build_model(4, 6, 3, 2, 2, seed=3)


def test_clients_are_reproducible(model):
    task = make_target_task(model, seed=3)
    a = generate_clients(task, n_clients=5, samples=10, skew=0.5, seed=3)
    b = generate_clients(make_target_task(model, seed=3), n_clients=5, samples=10, skew=0.5, seed=3)
    assert [c.id for c in a] == list(range(5))
    for x, y in zip(a, b):
        assert np.array_equal(x.inputs, y.inputs) and np.array_equal(x.targets, y.targets)
    assert a[0].inputs.shape == (10, 3) and a[0].targets.shape == (10, 2)


def test_unshifted_noiseless_task_is_solved_by_the_base(model):
    task = make_target_task(model, task_shift=0.0, noise=0.0, seed=1)
    (client,) = generate_clients(task, n_clients=1, samples=16, skew=1.0, seed=1)
    assert mse(model, client.inputs, client.targets) == 0.0


def test_shifted_task_leaves_a_gap_for_the_adapters(model):
    task = make_target_task(model, task_shift=0.5, noise=0.0, seed=1)
    x, y = make_test_set(task, samples=32, seed=1)
    assert mse(model, x, y) > 0.0
    assert task.means.shape == (4, 3)


def test_mixture_weights_follow_skew():
    rng = np.random.default_rng(0)
    flat = _mixture_weights(rng, 4, 1e6)
    np.testing.assert_allclose(flat, 0.25, atol=0.01)
    peaked = _mixture_weights(np.random.default_rng(1), 4, 1e-4)
    assert peaked.sum() == pytest.approx(1.0)
    assert peaked.max() > 0.99


def test_bad_arguments(model):
    task = make_target_task(model, seed=0)
    with pytest.raises(TaskError, match="skew"):
        generate_clients(task, n_clients=2, samples=4, skew=0.0, seed=0)
    with pytest.raises(TaskError, match="client count"):
        generate_clients(task, n_clients=0, samples=4, skew=0.5, seed=0)
    with pytest.raises(TaskError, match="test samples"):
        make_test_set(task, samples=0, seed=0)
    with pytest.raises(TaskError, match="components"):
        make_target_task(model, components=0)
