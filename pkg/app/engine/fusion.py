# -*- coding: utf-8 -*-
"""
Differential-based layer fusion: layer arithmetic on flattened layer vectors,
representative layers per group and stage submodel assembly.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from app.core.errors import DevftError
from app.domain.models import GroupPartition, LayeredModel, LayerParams
from app.engine.grouping import GroupingError, validate_partition
from app.engine.lora import flatten_layer, unflatten_layer
from app.utils.seeding import STREAM_FUSION, derive_seed

log = logging.getLogger("fusion")

STRATEGIES = ("dblf", "sum", "r_one")


class FusionError(DevftError):
    pass


@dataclass
class RepresentativeLayer:
    layer: LayerParams
    group_id: int
    beta: float
    strategy: str = "dblf"


def _pair(a: np.ndarray, b: np.ndarray):
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise FusionError(f"layer vector length mismatch: {x.size} vs {y.size}")
    return x, y


def layer_add(theta_i: np.ndarray, theta_j: np.ndarray) -> np.ndarray:
    x, y = _pair(theta_i, theta_j)
    return x + y


def layer_sub(theta_j: np.ndarray, theta_i: np.ndarray) -> np.ndarray:
    """theta_j - theta_i: what layer j holds beyond layer i."""
    x, y = _pair(theta_j, theta_i)
    return x - y


def fuse_vectors(vectors: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """anchor + beta * sum_j (theta_j - anchor); the first vector is the anchor."""
    if len(vectors) == 0:
        raise FusionError("cannot fuse an empty group")
    anchor = np.asarray(vectors[0], dtype=np.float64)
    if len(vectors) == 1:
        return anchor.copy()
    diff = np.zeros_like(anchor)
    for theta in vectors:
        diff = layer_add(diff, layer_sub(theta, anchor))
    return anchor + beta * diff


def sum_vectors(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise FusionError("cannot fuse an empty group")
    out = np.asarray(vectors[0], dtype=np.float64).copy()
    for theta in vectors[1:]:
        out = layer_add(out, theta)
    return out


def _check_shapes(layers: Sequence[LayerParams]) -> None:
    if len(layers) == 0:
        raise FusionError("cannot fuse an empty group")
    shape = layers[0].shape
    for layer in layers[1:]:
        if layer.shape != shape:
            raise FusionError(f"group mixes layer shapes {shape} and {layer.shape}")


def fuse_group(layers: Sequence[LayerParams], beta: float, group_id: int = 0) -> RepresentativeLayer:
    """
    Representative layer of one group; layers[0] is the anchor (smallest index).
    Base and adapter segments are fused alike, so the result is a complete layer.
    """
    _check_shapes(layers)
    fused = fuse_vectors([flatten_layer(layer) for layer in layers], beta)
    rep = unflatten_layer(fused, layers[0].shape)
    rep.origin = {"group_id": group_id, "beta": beta, "strategy": "dblf"}
    return RepresentativeLayer(layer=rep, group_id=group_id, beta=beta, strategy="dblf")


def fusion_strategy(
    layers: Sequence[LayerParams],
    strategy: str,
    beta: float,
    seed: int,
    group_id: int = 0,
) -> RepresentativeLayer:
    if strategy == "dblf":
        return fuse_group(layers, beta, group_id)
    _check_shapes(layers)
    if strategy == "sum":
        fused = sum_vectors([flatten_layer(layer) for layer in layers])
        rep = unflatten_layer(fused, layers[0].shape)
    elif strategy == "r_one":
        pick = int(np.random.default_rng(seed).integers(len(layers)))
        rep = layers[pick].copy()
    else:
        raise FusionError(f"unknown fusion strategy: {strategy} (expected one of {', '.join(STRATEGIES)})")
    rep.origin = {"group_id": group_id, "beta": beta, "strategy": strategy}
    return RepresentativeLayer(layer=rep, group_id=group_id, beta=beta, strategy=strategy)


def build_submodel(
    model: LayeredModel,
    partition: GroupPartition,
    beta: float,
    strategy: str = "dblf",
    seed: int = 0,
) -> LayeredModel:
    """
    One representative layer per group, in partition order, between the global
    input map and head. The global model is not modified.
    """
    try:
        validate_partition(partition, model.L)
    except GroupingError as e:
        raise FusionError(f"invalid partition for submodel: {e.message}")
    reps: List[LayerParams] = []
    for gid, group in enumerate(partition.groups):
        members = [model.layers[i] for i in group]
        rep = fusion_strategy(members, strategy, beta, seed=derive_seed(seed, STREAM_FUSION, gid), group_id=gid)
        reps.append(rep.layer)
    log.debug("Submodel built: %d -> %d layers (strategy=%s, beta=%s)", model.L, len(reps), strategy, beta)
    return LayeredModel(
        input_map=model.input_map,
        layers=reps,
        head=model.head,
        residual=model.residual,
        seed=model.seed,
    )
