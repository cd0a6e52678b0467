# -*- coding: utf-8 -*-
"""
Executable checks of the fusion-shift inequality and empirical tracking of
the per-stage mean squared gradient norm.
"""
import logging
from itertools import combinations
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.core.errors import DevftError
from app.domain.models import GroupPartition, LayeredModel, RoundRecord, ShiftReport
from app.engine.fusion import fuse_vectors
from app.engine.grouping import validate_partition
from app.engine.lora import build_model, flatten_layer
from app.utils.seeding import derive_rng

log = logging.getLogger("analysis")

# relative slack for floating-point rounding when comparing shift with bound
_TOL = 1e-12


class AnalysisError(DevftError):
    pass


def _max_pairwise(vectors: Sequence[np.ndarray]) -> float:
    return max((float(np.linalg.norm(a - b)) for a, b in combinations(vectors, 2)), default=0.0)


def _sum_pairwise(vectors: Sequence[np.ndarray]) -> float:
    return float(sum(np.linalg.norm(a - b) for a, b in combinations(vectors, 2)))


def group_fusion_shift(vectors: Sequence[np.ndarray], beta: float) -> Tuple[float, float]:
    """
    shift = |fuse(g, beta) - fuse(g, 1)|,  bound = |beta - 1| * |g| * max_{j,k} |theta_j - theta_k|.
    Vectors are flattened layers, anchor first.
    """
    if len(vectors) == 0:
        raise AnalysisError("empty group")
    vs = [np.asarray(v, dtype=np.float64) for v in vectors]
    shift = float(np.linalg.norm(fuse_vectors(vs, beta) - fuse_vectors(vs, 1.0)))
    bound = abs(beta - 1.0) * len(vs) * _max_pairwise(vs)
    return shift, bound


def verify_lemma1(model: LayeredModel, partition: GroupPartition, beta: float) -> ShiftReport:
    """Evaluate the fusion-shift bound for every group; violating groups are listed, never dropped."""
    validate_partition(partition, model.L)
    shifts: List[float] = []
    bounds: List[float] = []
    deltas: List[float] = []
    violations: List[int] = []
    pair_mass = 0.0
    for gid, group in enumerate(partition.groups):
        vectors = [flatten_layer(model.layers[i]) for i in group]
        shift, bound = group_fusion_shift(vectors, beta)
        shifts.append(shift)
        bounds.append(bound)
        deltas.append(_max_pairwise(vectors))
        pair_mass += _sum_pairwise(vectors)
        if shift > bound + _TOL * max(1.0, bound):
            violations.append(gid)
            log.warning("Fusion-shift bound violated in group %d: shift=%.6g bound=%.6g", gid, shift, bound)
    total_shift = float(sum(shifts))
    denominator = beta * pair_mass
    return ShiftReport(
        beta=beta,
        group_sizes=[len(g) for g in partition.groups],
        shifts=shifts,
        bounds=bounds,
        deltas=deltas,
        total_shift=total_shift,
        total_bound=float(sum(bounds)),
        violations=violations,
        implied_constant=(total_shift / denominator) if denominator > 0.0 else None,
    )


def fuzz_lemma1(
    trials: int,
    betas: Sequence[float] = (0.1, 0.15, 0.5),
    layers: int = 8,
    groups: int = 3,
    width: int = 6,
    rank: int = 2,
    seed: int = 0,
) -> Dict[str, object]:
    """Random models x random partitions x betas; counts violations of the fusion-shift bound."""
    if trials < 1:
        raise AnalysisError(f"trials must be positive, got {trials}")
    if not 1 <= groups <= layers:
        raise AnalysisError(f"groups must be in [1, {layers}], got {groups}")
    checked = 0
    violations: List[Dict[str, object]] = []
    worst_ratio = 0.0
    for trial in range(trials):
        rng = derive_rng(seed, trial)
        model = build_model(layers, width, width, width, rank, layer_correlation=float(rng.uniform(0.0, 0.95)), seed=seed * 100003 + trial)
        # trained-looking adapters so the adapter segment is not all zero
        for layer in model.layers:
            layer.adapter.B = rng.normal(0.0, 0.1, size=layer.adapter.B.shape)
        labels = np.concatenate([np.arange(groups), rng.integers(0, groups, size=layers - groups)])
        partition = GroupPartition.from_labels(rng.permutation(labels))
        for beta in betas:
            report = verify_lemma1(model, partition, beta)
            checked += 1
            if report.total_bound > 0.0:
                worst_ratio = max(worst_ratio, report.total_shift / report.total_bound)
            if report.violations:
                violations.append({"trial": trial, "beta": beta, "groups": report.violations})
    log.info("Fusion-shift fuzz: %d checks, %d violations, worst shift/bound %.4f", checked, len(violations), worst_ratio)
    return {
        "trials": trials,
        "betas": list(betas),
        "checks": checked,
        "violations": violations,
        "worst_shift_to_bound": worst_ratio,
    }


def gradient_norm_series(records: Sequence[RoundRecord]) -> Dict[int, List[float]]:
    """Per-stage prefix means of grad_norm_sq, in round order."""
    if not records:
        raise AnalysisError("no round records")
    series: Dict[int, List[float]] = {}
    sums: Dict[int, float] = {}
    for rec in records:
        acc = sums.get(rec.stage, 0.0) + rec.grad_norm_sq
        sums[rec.stage] = acc
        out = series.setdefault(rec.stage, [])
        out.append(acc / (len(out) + 1))
    return series
