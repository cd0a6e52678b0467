# -*- coding: utf-8 -*-
"""
Synthetic regression task and non-IID client datasets.
"""
import logging
from typing import List, Tuple

import numpy as np

from app.core.errors import DevftError
from app.domain.models import Client, LayeredModel, LayerParams, TargetTask
from app.engine.lora import predict
from app.utils.seeding import STREAM_CLIENTS, STREAM_TASK, STREAM_TEST, derive_rng

log = logging.getLogger("tasks")


class TaskError(DevftError):
    pass


def make_target_task(
    model: LayeredModel,
    task_shift: float = 0.25,
    noise: float = 1.0,
    components: int = 4,
    seed: int = 0,
) -> TargetTask:
    """
    Reference network = the model's base with a random rank-r perturbation of
    every layer weight, so a rank-r adapter can close the gap.
    """
    if components < 1:
        raise TaskError(f"components must be positive, got {components}")
    if task_shift < 0 or noise < 0:
        raise TaskError("task_shift and noise must be non-negative")
    rng = derive_rng(seed, STREAM_TASK)
    layers: List[LayerParams] = []
    for layer in model.layers:
        r = layer.adapter.rank
        u = rng.normal(0.0, 1.0 / np.sqrt(layer.d_out), size=(layer.d_out, r))
        v = rng.normal(0.0, 1.0 / np.sqrt(layer.d_in), size=(layer.d_in, r))
        w = layer.W + task_shift * (u @ v.T) / np.sqrt(r)
        layers.append(LayerParams(W=w, b=layer.b, adapter=layer.adapter.copy(), activation=layer.activation))
    reference = LayeredModel(
        input_map=model.input_map,
        layers=layers,
        head=model.head,
        residual=model.residual,
        seed=model.seed,
    )
    means = rng.normal(0.0, 1.5, size=(components, model.input_dim))
    return TargetTask(reference=reference, noise=float(noise), means=means, seed=seed)


def _draw(task: TargetTask, weights: np.ndarray, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    comp = rng.choice(len(weights), size=n, p=weights)
    x = task.means[comp] + rng.normal(0.0, 1.0, size=(n, task.means.shape[1]))
    y = predict(task.reference, x)
    if task.noise > 0:
        y = y + rng.normal(0.0, task.noise, size=y.shape)
    return x, y


def _mixture_weights(rng: np.random.Generator, components: int, skew: float) -> np.ndarray:
    w = rng.dirichlet(np.full(components, skew))
    w = np.nan_to_num(w, nan=0.0)
    total = w.sum()
    if total <= 0.0:
        # tiny concentrations can underflow to all-zero draws
        w = np.zeros(components)
        w[int(rng.integers(components))] = 1.0
        return w
    return w / total


def generate_clients(task: TargetTask, n_clients: int, samples: int, skew: float, seed: int) -> List[Client]:
    """
    Client i mixes the task's Gaussian components with Dirichlet(skew) weights;
    small skew gives strongly non-IID inputs.
    """
    if n_clients < 1:
        raise TaskError(f"client count must be positive, got {n_clients}")
    if samples < 1:
        raise TaskError(f"samples per client must be positive, got {samples}")
    if not skew > 0:
        raise TaskError(f"skew must be positive, got {skew}")
    components = task.means.shape[0]
    clients: List[Client] = []
    for cid in range(n_clients):
        rng = derive_rng(seed, STREAM_CLIENTS, cid)
        weights = _mixture_weights(rng, components, skew)
        x, y = _draw(task, weights, samples, rng)
        clients.append(Client(id=cid, inputs=x, targets=y))
    log.debug("Generated %d clients x %d samples (skew=%g)", n_clients, samples, skew)
    return clients


def make_test_set(task: TargetTask, samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """IID held-out set: uniform mixture weights."""
    if samples < 1:
        raise TaskError(f"test samples must be positive, got {samples}")
    components = task.means.shape[0]
    return _draw(task, np.full(components, 1.0 / components), samples, derive_rng(seed, STREAM_TEST))
