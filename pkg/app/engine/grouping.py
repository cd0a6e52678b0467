# -*- coding: utf-8 -*-
"""
Deconfliction-guided layer grouping: cosine similarity between layer vectors,
a nonnegative similarity graph, and an unnormalized spectral partition.
"""
import logging
from typing import List

import numpy as np

from app.core.errors import DevftError
from app.domain.models import GroupPartition, LayeredModel
from app.engine.lora import flatten_layer
from app.engine.numerics import cosine_similarity, kmeans, symmetric_eigh

log = logging.getLogger("grouping")

STRATEGIES = ("spectral", "random", "even")


class GroupingError(DevftError):
    pass


def validate_partition(partition: GroupPartition, order: int) -> None:
    """Groups must be non-empty, pairwise disjoint and cover 0..order-1."""
    seen: set = set()
    for gid, group in enumerate(partition.groups):
        if not group:
            raise GroupingError(f"group {gid} is empty")
        for idx in group:
            if idx < 0 or idx >= order:
                raise GroupingError(f"group {gid} holds index {idx} outside [0, {order})")
            if idx in seen:
                raise GroupingError(f"layer {idx} appears in more than one group")
            seen.add(idx)
    if len(seen) != order:
        missing = sorted(set(range(order)) - seen)
        raise GroupingError(f"partition does not cover layers {missing}")


def similarity_matrix(model: LayeredModel) -> np.ndarray:
    """w_ij = cos(theta_i, theta_j) over flattened layers (base + adapter); diagonal is 1."""
    if model.L < 1:
        raise GroupingError("model has no layers")
    vectors = [flatten_layer(layer) for layer in model.layers]
    n = len(vectors)
    w = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            w[i, j] = w[j, i] = cosine_similarity(vectors[i], vectors[j])
    return w


def shifted_weights(w: np.ndarray) -> np.ndarray:
    """w'_ij = (1 + w_ij) / 2 off the diagonal, 0 on it."""
    out = 0.5 * (1.0 + np.asarray(w, dtype=np.float64))
    np.fill_diagonal(out, 0.0)
    return out


def laplacian(w: np.ndarray) -> np.ndarray:
    wp = shifted_weights(w)
    return np.diag(wp.sum(axis=1)) - wp


def cut_value(w: np.ndarray, partition: GroupPartition, weights: str = "shifted") -> float:
    """
    Sum over ordered group pairs (n, m), n != m, of the cross-group weight mass.
    Every unordered cross pair is counted twice.
    weights="shifted" uses the nonnegative graph weights, "raw" the similarities as given.
    """
    w = np.asarray(w, dtype=np.float64)
    validate_partition(partition, w.shape[0])
    if weights == "shifted":
        mat = shifted_weights(w)
    elif weights == "raw":
        mat = w
    else:
        raise GroupingError(f"unknown cut weights mode: {weights}")
    labels = partition.labels(w.shape[0])
    cross = labels[:, None] != labels[None, :]
    return float(np.sum(mat[cross]))


def spectral_partition(w: np.ndarray, n_groups: int, seed: int) -> GroupPartition:
    """
    Embed layers with the n_groups eigenvectors of smallest eigenvalue of
    L = D - W' and cluster the embedding rows with k-means (k = n_groups).
    """
    w = np.asarray(w, dtype=np.float64)
    order = w.shape[0]
    if n_groups < 1 or n_groups > order:
        raise GroupingError(f"group count {n_groups} outside [1, {order}]")
    if n_groups == 1:
        return GroupPartition(groups=[list(range(order))])

    eig = symmetric_eigh(laplacian(w))
    embedding = eig.eigenvectors[:, :n_groups]
    if np.all(np.ptp(embedding, axis=0) == 0.0):
        raise GroupingError(f"degenerate spectral embedding: all {order} rows identical for {n_groups} groups")
    log.debug("Laplacian spectrum head: %s", np.array2string(eig.eigenvalues[:n_groups], precision=4))
    assignment = kmeans(embedding, n_groups, seed)
    return GroupPartition.from_labels(assignment.labels)


def even_sizes(order: int, n_groups: int) -> List[int]:
    """Block sizes order // n_groups, remainder spread one-per-group from the front."""
    base, extra = divmod(order, n_groups)
    return [base + (1 if i < extra else 0) for i in range(n_groups)]


def _blocks(indices: List[int], sizes: List[int]) -> List[List[int]]:
    out = []
    start = 0
    for size in sizes:
        out.append(indices[start:start + size])
        start += size
    return out


def grouping_strategy(model: LayeredModel, n_groups: int, strategy: str, seed: int) -> GroupPartition:
    order = model.L
    if n_groups < 1 or n_groups > order:
        raise GroupingError(f"group count {n_groups} outside [1, {order}]")
    if strategy == "spectral":
        return spectral_partition(similarity_matrix(model), n_groups, seed)
    sizes = even_sizes(order, n_groups)
    if strategy == "even":
        return GroupPartition(groups=_blocks(list(range(order)), sizes))
    if strategy == "random":
        perm = [int(i) for i in np.random.default_rng(seed).permutation(order)]
        return GroupPartition(groups=_blocks(perm, sizes))
    raise GroupingError(f"unknown grouping strategy: {strategy} (expected one of {', '.join(STRATEGIES)})")
