# -*- coding: utf-8 -*-
"""
Mechanism-level acceptance checks, runnable from the CLI (`self-test`).
Each check returns a CheckResult instead of raising, so one failure does not
hide the others.
"""
import logging
from dataclasses import asdict, dataclass
from itertools import product
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import ExperimentConfig, config_from_dict, with_overrides
from app.domain.models import GroupPartition, LayeredModel, LayerParams
from app.engine.analysis import fuzz_lemma1
from app.engine.fusion import fuse_group
from app.engine.grouping import cut_value, laplacian, similarity_matrix, spectral_partition
from app.engine.lora import build_model, flatten_layer, loss_and_grads, set_adapters, unflatten_layer
from app.engine.numerics import symmetric_eigh
from app.harness.experiment import compare_methods, run_experiment
from app.infra.client_pool import ClientPool
from app.utils.seeding import derive_rng

log = logging.getLogger("selftest")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def quick_config(seed: int = 0, **overrides: Any) -> ExperimentConfig:
    """Small desk-scale run: L=16 with the default 4-stage halving schedule."""
    cfg = config_from_dict({
        "seed": seed,
        "model": {"layers": 16, "width": 8, "input_dim": 4, "output_dim": 2, "rank": 2},
        "schedule": {"rounds_per_stage": 2, "local_steps": 2, "batch_size": 8},
        "data": {"clients": 20, "samples_per_client": 32, "test_samples": 64},
    })
    return with_overrides(cfg, overrides) if overrides else cfg


def planted_cluster_model(
    layers: int,
    seed: int,
    groups: int = 2,
    width: int = 4,
    rank: int = 1,
    noise: float = 1e-3,
) -> Tuple[LayeredModel, GroupPartition]:
    """
    Model whose layer vectors sit on `groups` orthogonal directions plus small
    noise, with a random planted split (every cluster non-empty).
    """
    if not 2 <= groups <= layers:
        raise ValueError(f"need 2 <= groups <= layers, got groups={groups}, layers={layers}")
    rng = derive_rng(seed, layers, groups)
    base = build_model(layers, width, width, width, rank, layer_correlation=0.0, seed=seed)
    shape = base.layers[0].shape
    q, _ = np.linalg.qr(rng.normal(size=(shape.size, groups)))
    cuts = np.sort(rng.choice(np.arange(1, layers), size=groups - 1, replace=False))
    sizes = np.diff(np.concatenate([[0], cuts, [layers]]))
    labels = rng.permutation(np.repeat(np.arange(groups), sizes))
    stack: List[LayerParams] = []
    for lab in labels:
        v = q[:, int(lab)] + noise * rng.normal(size=shape.size) / np.sqrt(shape.size)
        stack.append(unflatten_layer(v, shape))
    model = LayeredModel(input_map=base.input_map, layers=stack, head=base.head, residual=base.residual, seed=seed)
    return model, GroupPartition.from_labels(labels)


def _all_partitions(n: int, n_groups: int):
    """Every labelling of n layers into n_groups non-empty groups, layer 0 pinned to label 0."""
    for tail in product(range(n_groups), repeat=n - 1):
        labels = (0,) + tail
        if len(set(labels)) == n_groups:
            yield GroupPartition.from_labels(labels)


def exhaustive_min_cut(w: np.ndarray, n_groups: int = 2, weights: str = "raw") -> Tuple[float, GroupPartition]:
    """Brute force over all partitions into n_groups non-empty groups."""
    best: Optional[Tuple[float, GroupPartition]] = None
    for part in _all_partitions(w.shape[0], n_groups):
        value = cut_value(w, part, weights=weights)
        if best is None or value < best[0]:
            best = (value, part)
    assert best is not None
    return best


def cut_rank(w: np.ndarray, partition: GroupPartition, weights: str = "raw") -> float:
    """Share of all partitions with the same group count whose cut is at least this one's."""
    value = cut_value(w, partition, weights=weights)
    values = [cut_value(w, p, weights=weights) for p in _all_partitions(w.shape[0], partition.size)]
    return sum(1 for v in values if v >= value - 1e-12) / len(values)


def fusion_oracle(vectors: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """Element-by-element evaluation of anchor + beta * sum_j (theta_j - anchor)."""
    anchor = vectors[0]
    out = np.empty_like(anchor)
    for e in range(anchor.size):
        acc = 0.0
        for v in vectors:
            acc += v[e] - anchor[e]
        out[e] = anchor[e] + beta * acc
    return out


def finite_difference_error(model: LayeredModel, x: np.ndarray, y: np.ndarray, h: float = 1e-6) -> float:
    """Relative error between analytic adapter gradients and central differences."""
    _, grads = loss_and_grads(model, x, y)
    analytic = np.concatenate([np.concatenate([g.A.ravel(), g.B.ravel()]) for g in grads])
    adapters = [(layer.adapter.A.copy(), layer.adapter.B.copy()) for layer in model.layers]
    numeric = []
    for i in range(model.L):
        for which in (0, 1):
            mat = adapters[i][which]
            for idx in np.ndindex(*mat.shape):
                vals = []
                for sign in (1.0, -1.0):
                    trial = [(a.copy(), b.copy()) for a, b in adapters]
                    trial[i][which][idx] += sign * h
                    vals.append(loss_and_grads(set_adapters(model, trial), x, y)[0])
                numeric.append((vals[0] - vals[1]) / (2.0 * h))
    numeric_arr = np.array(numeric)
    scale = max(float(np.linalg.norm(numeric_arr)), float(np.linalg.norm(analytic)), 1e-12)
    return float(np.linalg.norm(numeric_arr - analytic)) / scale


def check_comm_ratio(seed: int = 0) -> CheckResult:
    staged = run_experiment(quick_config(seed))
    e2e = run_experiment(quick_config(seed, **{"algorithm.method": "end2end"}))
    ratio = staged.summary["total_bytes"] / e2e.summary["total_bytes"]
    return CheckResult("comm_ratio", abs(ratio - 0.46875) <= 0.005 * 0.46875, {"ratio": ratio})


def check_stage1_resources(seed: int = 0) -> CheckResult:
    staged = run_experiment(quick_config(seed))
    e2e = run_experiment(quick_config(seed, **{"algorithm.method": "end2end"}))
    first, full = staged.metrics.records[0], e2e.metrics.records[0]
    cap, depth = staged.schedule.capacities[0], staged.config.model.layers
    ok = (
        first.uplink_bytes * depth == full.uplink_bytes * cap
        and first.compute_units * depth == full.compute_units * cap
    )
    return CheckResult("stage1_resources", ok, {
        "stage1_bytes": first.uplink_bytes,
        "end2end_bytes": full.uplink_bytes,
        "stage1_compute": first.compute_units,
        "end2end_compute": full.compute_units,
    })


def check_reduction(seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> CheckResult:
    mismatched = []
    for seed in seeds:
        e2e = run_experiment(quick_config(seed, **{"algorithm.method": "end2end"}))
        single = run_experiment(quick_config(seed, **{
            "schedule.stages": 1,
            "schedule.rounds_per_stage": e2e.schedule.total_rounds,
        }))
        if [r.as_row() for r in e2e.metrics.records] != [r.as_row() for r in single.metrics.records]:
            mismatched.append(seed)
    return CheckResult("reduction", not mismatched, {"seeds": list(seeds), "mismatched": mismatched})


def check_planted_grouping(instances: int = 20) -> CheckResult:
    failures = []
    for k in range(instances):
        layers = 6 + k % 3
        groups = 2 + k % 2
        model, planted = planted_cluster_model(layers, seed=k, groups=groups)
        w = similarity_matrix(model)
        found = spectral_partition(w, groups, seed=k)
        best_value, _ = exhaustive_min_cut(w, groups)
        if found.groups != planted.groups or cut_value(w, found, weights="raw") > best_value + 1e-12:
            failures.append(k)
    return CheckResult("planted_grouping", not failures, {"instances": instances, "failed": failures})


def check_fusion_oracle(groups: int = 100) -> CheckResult:
    worst = 0.0
    rng = derive_rng(7, groups)
    for k in range(groups):
        size = int(rng.integers(1, 6))
        beta = float(rng.uniform(0.0, 1.0))
        model = build_model(size, 3, 3, 3, 2, layer_correlation=float(rng.uniform(0.0, 0.9)), seed=k)
        for layer in model.layers:
            layer.adapter.B = rng.normal(size=layer.adapter.B.shape)
        vectors = [flatten_layer(layer) for layer in model.layers]
        fused = flatten_layer(fuse_group(model.layers, beta).layer)
        worst = max(worst, float(np.max(np.abs(fused - fusion_oracle(vectors, beta)))))
    return CheckResult("fusion_oracle", worst <= 1e-12, {"groups": groups, "max_abs_error": worst})


def check_lemma(trials: int = 100) -> CheckResult:
    report = fuzz_lemma1(trials)
    return CheckResult("fusion_shift_bound", not report["violations"], report)


def check_gradients(pairs: int = 50) -> CheckResult:
    worst = 0.0
    for k in range(pairs):
        rng = derive_rng(11, k)
        model = build_model(3, 4, 3, 2, 2, residual=bool(k % 2), seed=k)
        for layer in model.layers:
            layer.adapter.B = rng.normal(0.0, 0.3, size=layer.adapter.B.shape)
        x = rng.normal(size=(5, 3))
        y = rng.normal(size=(5, 2))
        worst = max(worst, finite_difference_error(model, x, y))
    return CheckResult("gradients", worst <= 1e-4, {"pairs": pairs, "max_relative_error": worst})


def check_eigensolver(orders: Sequence[int] = (1, 2, 8, 32, 64)) -> CheckResult:
    worst_recon = 0.0
    worst_orth = 0.0
    rng = derive_rng(13)
    for n in orders:
        g = rng.normal(size=(n, n))
        m = 0.5 * (g + g.T)
        eig = symmetric_eigh(m)
        v, lam = eig.eigenvectors, eig.eigenvalues
        worst_recon = max(worst_recon, float(np.linalg.norm(m - v @ np.diag(lam) @ v.T)))
        worst_orth = max(worst_orth, float(np.linalg.norm(v.T @ v - np.eye(n))))
    model = build_model(8, 4, 4, 4, 2, seed=3)
    lap = symmetric_eigh(laplacian(similarity_matrix(model)))
    const = np.full(8, 1.0 / np.sqrt(8.0))
    ground_ok = abs(lap.eigenvalues[0]) <= 1e-8 and np.allclose(lap.eigenvectors[:, 0], const, atol=1e-8)
    ok = worst_recon <= 1e-8 and worst_orth <= 1e-8 and ground_ok
    return CheckResult("eigensolver", ok, {
        "reconstruction": worst_recon,
        "orthonormality": worst_orth,
        "laplacian_ground_state": bool(ground_ok),
    })


def check_determinism(seed: int = 0, workers: int = 4) -> CheckResult:
    inline = run_experiment(quick_config(seed), ClientPool(1))
    threaded = run_experiment(quick_config(seed, **{"runtime.workers": workers}), ClientPool(workers))
    same_rows = [r.as_row() for r in inline.metrics.records] == [r.as_row() for r in threaded.metrics.records]
    same_model = inline.summary["model_checksum"] == threaded.summary["model_checksum"]
    return CheckResult("determinism", same_rows and same_model, {"workers": workers})


def check_benefit(seeds: Sequence[int] = tuple(range(10))) -> CheckResult:
    report = compare_methods(ExperimentConfig(), seeds)
    ok = report["loss_within_10pct"] >= int(np.ceil(0.7 * len(seeds))) and report["max_bytes_ratio"] <= 0.5
    return CheckResult("benefit", ok, report)


def run_selftest(full: bool = False) -> List[CheckResult]:
    checks: List[Callable[[], CheckResult]] = [
        check_comm_ratio,
        check_stage1_resources,
        check_reduction,
        check_planted_grouping,
        check_fusion_oracle,
        check_lemma,
        check_gradients,
        check_eigensolver,
        check_determinism,
    ]
    if full:
        checks.append(check_benefit)
    results: List[CheckResult] = []
    for check in checks:
        try:
            res = check()
        except Exception as e:
            log.exception("Self-test check %s crashed: %s", check.__name__, e)
            res = CheckResult(check.__name__.replace("check_", ""), False, {"error": str(e)})
        log.info("Self-test %-20s %s", res.name, "ok" if res.passed else "FAILED")
        results.append(res)
    return results
