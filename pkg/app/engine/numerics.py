# -*- coding: utf-8 -*-
"""
Dense linear-algebra primitives used by layer grouping:
cosine similarity, a cyclic Jacobi eigensolver and seeded k-means.
All arithmetic is float64. Functions are pure.
"""
import logging
import math
from typing import Sequence

import numpy as np

from app.core.errors import DevftError
from app.domain.models import ClusterAssignment, EigenResult

log = logging.getLogger("numerics")

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
KMEANS_MAX_ITER = 200


class NumericsError(DevftError):
    pass


class ConvergenceError(NumericsError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def _as_vector(v: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).ravel()
    if arr.size == 0:
        raise NumericsError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} has non-finite entries")
    return arr


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """
    <a,b> / (|a|·|b|), clamped to [-1, 1].
    A zero-norm operand means a degenerate all-zero layer and is an error.
    """
    x = _as_vector(a, "a")
    y = _as_vector(b, "b")
    if x.shape != y.shape:
        raise NumericsError(f"length mismatch: {x.size} vs {y.size}")
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise NumericsError("zero-norm vector in cosine similarity (degenerate all-zero layer)")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def _off_norm(a: np.ndarray) -> float:
    # summed directly: |A|^2 - |diag|^2 cancels to rounding noise near convergence
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def symmetric_eigh(
    m: np.ndarray,
    tol: float = JACOBI_TOL,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> EigenResult:
    """
    Full spectrum of a symmetric matrix by cyclic Jacobi rotations.

    Pairs are visited in fixed row-major order (p < q). Sweeps stop once the
    off-diagonal Frobenius norm drops to tol·max(1, |M|_F). Eigenvalues are
    returned ascending; each eigenvector is signed so that its largest-magnitude
    component (first one on ties) is nonnegative.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise NumericsError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError("matrix has non-finite entries")
    scale = max(1.0, float(np.linalg.norm(a)))
    if float(np.max(np.abs(a - a.T))) > 1e-12 * scale:
        raise NumericsError("matrix is not symmetric")
    a = 0.5 * (a + a.T)

    n = a.shape[0]
    v = np.eye(n)
    threshold = tol * scale
    sweeps = 0
    while _off_norm(a) > threshold:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", _off_norm(a))
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0.0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    v = v[:, order]
    for j in range(n):
        lead = int(np.argmax(np.abs(v[:, j])))
        if v[lead, j] < 0.0:
            v[:, j] = -v[:, j]
    return EigenResult(eigenvalues=eigenvalues, eigenvectors=v, sweeps=sweeps)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def _farthest_point_seeds(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    n = x.shape[0]
    first = int(np.random.default_rng(seed).integers(n))
    chosen = [first]
    closest = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(closest))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[chosen].copy()


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> None:
    """Give every empty cluster the point farthest from its current centroid (in place)."""
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return
        j = int(empty[0])
        dist = np.sum((x - centroids[labels]) ** 2, axis=1)
        # only points whose cluster can spare them
        dist[counts[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        log.warning("k-means: cluster %d empty, reassigning point %d", j, far)
        labels[far] = j
        centroids[j] = x[far]


def _distortion(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum((x - centroids[labels]) ** 2))


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER) -> ClusterAssignment:
    """
    Lloyd iterations from greedy farthest-point seeding.
    Ties in nearest-centroid go to the lowest centroid index; stops when no label changes.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise NumericsError(f"points must be a 2-D array, got {x.ndim}-D")
    n = x.shape[0]
    if k < 1:
        raise NumericsError(f"k must be positive, got {k}")
    if n < k:
        raise NumericsError(f"need at least k={k} points, got {n}")
    if not np.all(np.isfinite(x)):
        raise NumericsError("points have non-finite entries")

    centroids = _farthest_point_seeds(x, k, seed)
    labels = None
    history = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_labels = np.argmin(_sq_distances(x, centroids), axis=1).astype(np.int64)
        _repair_empty(x, new_labels, centroids, k)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        history.append(_distortion(x, labels, centroids))

    return ClusterAssignment(
        labels=labels,
        k=k,
        distortion=_distortion(x, labels, centroids),
        iterations=iterations,
        history=history,
    )
