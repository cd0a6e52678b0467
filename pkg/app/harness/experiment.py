# -*- coding: utf-8 -*-
"""
End-to-end wiring of one simulated run: config -> model, task, clients ->
staged schedule -> summary and plot-ready rows.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import ExperimentConfig, config_to_dict, resolve_capacities, resolve_rounds, with_overrides
from app.domain.models import Client, LayeredModel, RoundRecord, RunMetrics, StageSchedule
from app.engine.federation import run_schedule, staged_learning_rates
from app.engine.lora import build_model, model_checksum, mse
from app.harness.tasks import generate_clients, make_target_task, make_test_set
from app.infra.client_pool import ClientPool

log = logging.getLogger("experiment")

PLOT_CSV_FIELDS = ("round", "cumulative_bytes", "cumulative_compute", "loss")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    schedule: StageSchedule
    model: LayeredModel
    metrics: RunMetrics
    summary: Dict[str, Any]
    plot: List[Dict[str, Any]]


def resolve_schedule(cfg: ExperimentConfig) -> StageSchedule:
    """
    DevFT uses the configured capacity rule. end2end is the same run with a
    single stage at full depth whose rounds are the sum of the staged rounds.
    """
    caps = resolve_capacities(cfg)
    rounds = resolve_rounds(cfg, len(caps))
    if cfg.algorithm.method == "end2end":
        caps, rounds = [cfg.model.layers], [sum(rounds)]
    sch = cfg.schedule
    return StageSchedule(
        capacities=caps,
        rounds=rounds,
        lrs=staged_learning_rates(sch.lr_initial, sch.lr_factor, sch.lr_final, len(caps)),
        beta=cfg.algorithm.beta,
        local_steps=sch.local_steps,
        client_fraction=sch.client_fraction,
        batch_size=sch.batch_size,
        weight_decay=sch.weight_decay,
        grouping=cfg.algorithm.grouping,
        fusion=cfg.algorithm.fusion,
    )


def build_world(cfg: ExperimentConfig) -> Tuple[LayeredModel, List[Client], Tuple[np.ndarray, np.ndarray]]:
    """Global model, client datasets and held-out set, all derived from cfg.seed."""
    m, d = cfg.model, cfg.data
    model = build_model(
        m.layers, m.width, m.input_dim, m.output_dim, m.rank,
        alpha=m.alpha,
        activation=m.activation,
        residual=m.residual,
        layer_correlation=m.layer_correlation,
        seed=cfg.seed,
    )
    task = make_target_task(model, d.task_shift, d.noise, d.components, cfg.seed)
    clients = generate_clients(task, d.clients, d.samples_per_client, d.skew, cfg.seed)
    test_set = make_test_set(task, d.test_samples, cfg.seed)
    return model, clients, test_set


def emit_plot_data(records: Sequence[RoundRecord]) -> List[Dict[str, Any]]:
    """(global round, cumulative bytes, cumulative compute, loss), one row per round."""
    rows: List[Dict[str, Any]] = []
    total_bytes = 0
    total_compute = 0
    for idx, rec in enumerate(records, start=1):
        total_bytes += rec.uplink_bytes + rec.downlink_bytes
        total_compute += rec.compute_units
        rows.append({
            "round": idx,
            "cumulative_bytes": total_bytes,
            "cumulative_compute": total_compute,
            "loss": rec.loss,
        })
    return rows


def target_reached(records: Sequence[RoundRecord], target_loss: Optional[float]) -> Optional[Dict[str, Any]]:
    """Traffic and compute spent up to the first round whose loss is <= target_loss."""
    if target_loss is None:
        return None
    for row, rec in zip(emit_plot_data(records), records):
        if rec.loss <= target_loss:
            return {
                "round": row["round"],
                "stage": rec.stage,
                "stage_round": rec.round,
                "cumulative_bytes": row["cumulative_bytes"],
                "cumulative_compute": row["cumulative_compute"],
            }
    return None


def summarize(cfg: ExperimentConfig, schedule: StageSchedule, metrics: RunMetrics, model: LayeredModel) -> Dict[str, Any]:
    test_losses = [s.test_loss for s in metrics.stages if s.test_loss is not None]
    return {
        "method": cfg.algorithm.method,
        "grouping": cfg.algorithm.grouping,
        "fusion": cfg.algorithm.fusion,
        "beta": cfg.algorithm.beta,
        "seed": cfg.seed,
        "capacities": list(schedule.capacities),
        "rounds": list(schedule.rounds),
        "lrs": list(schedule.lrs),
        "total_rounds": len(metrics.records),
        "total_uplink_bytes": metrics.total_uplink,
        "total_downlink_bytes": metrics.total_downlink,
        "total_bytes": metrics.total_bytes,
        "total_compute_units": metrics.total_compute,
        "peak_memory_bytes": metrics.peak_memory,
        "broadcast_bytes": sum(s.broadcast_bytes for s in metrics.stages),
        "final_loss": metrics.final_loss,
        "final_test_loss": test_losses[-1] if test_losses else None,
        "target_loss": cfg.target_loss,
        "target": target_reached(metrics.records, cfg.target_loss),
        "stages": [s.to_dict() for s in metrics.stages],
        "model_checksum": model_checksum(model),
        "config": config_to_dict(cfg),
    }


def run_experiment(cfg: ExperimentConfig, pool: Optional[ClientPool] = None) -> ExperimentResult:
    schedule = resolve_schedule(cfg)
    pool = pool or ClientPool(cfg.runtime.workers)
    log.info(
        "Run: method=%s capacities=%s rounds=%s grouping=%s fusion=%s beta=%g seed=%d",
        cfg.algorithm.method, schedule.capacities, schedule.rounds,
        cfg.algorithm.grouping, cfg.algorithm.fusion, cfg.algorithm.beta, cfg.seed,
    )
    model, clients, test_set = build_world(cfg)
    trained, metrics = run_schedule(model, schedule, clients, cfg.seed, pool, test_set)
    summary = summarize(cfg, schedule, metrics, trained)
    return ExperimentResult(
        config=cfg,
        schedule=schedule,
        model=trained,
        metrics=metrics,
        summary=summary,
        plot=emit_plot_data(metrics.records),
    )


def compare_methods(cfg: ExperimentConfig, seeds: Sequence[int], pool: Optional[ClientPool] = None) -> Dict[str, Any]:
    """
    DevFT against two end-to-end baselines per seed: one with equal total rounds
    (traffic comparison) and one with matched total compute units (loss comparison).
    Losses are compared on the held-out set, which does not depend on which
    clients the last round happened to sample.
    """
    devft_cfg = with_overrides(cfg, {"algorithm.method": "devft"})
    schedule = resolve_schedule(devft_cfg)
    layer_rounds = sum(c * t for c, t in zip(schedule.capacities, schedule.rounds))
    matched_rounds = max(1, int(round(layer_rounds / devft_cfg.model.layers)))
    matched_cfg = with_overrides(devft_cfg, {
        "algorithm.method": "end2end",
        "schedule.capacities": None,
        "schedule.initial_capacity": None,
        "schedule.growth": None,
        "schedule.stages": 1,
        "schedule.rounds_per_stage": None,
        "schedule.total_rounds": matched_rounds,
    })
    equal_cfg = with_overrides(devft_cfg, {"algorithm.method": "end2end"})
    rows: List[Dict[str, Any]] = []
    for seed in seeds:
        seeded = with_overrides(devft_cfg, {"seed": seed})
        start, _, (test_x, test_y) = build_world(seeded)
        staged = run_experiment(seeded, pool)
        equal = run_experiment(with_overrides(equal_cfg, {"seed": seed}), pool)
        matched = run_experiment(with_overrides(matched_cfg, {"seed": seed}), pool)
        loss_ratio = staged.summary["final_test_loss"] / matched.summary["final_test_loss"]
        # same held-out set, before any training
        untrained_ratio = mse(start, test_x, test_y) / matched.summary["final_test_loss"]
        bytes_ratio = staged.summary["total_bytes"] / equal.summary["total_bytes"]
        rows.append({
            "seed": seed,
            "devft_test_loss": staged.summary["final_test_loss"],
            "matched_test_loss": matched.summary["final_test_loss"],
            "devft_final_loss": staged.summary["final_loss"],
            "matched_final_loss": matched.summary["final_loss"],
            "devft_compute": staged.summary["total_compute_units"],
            "matched_compute": matched.summary["total_compute_units"],
            "loss_ratio": loss_ratio,
            "untrained_ratio": untrained_ratio,
            "bytes_ratio": bytes_ratio,
        })
        log.info("Compare seed=%d: loss ratio %.4f, bytes ratio %.5f", seed, loss_ratio, bytes_ratio)
    return {
        "matched_rounds": matched_rounds,
        "seeds": rows,
        "loss_within_10pct": sum(1 for r in rows if r["loss_ratio"] <= 1.1),
        "untrained_within_10pct": sum(1 for r in rows if r["untrained_ratio"] <= 1.1),
        "max_bytes_ratio": max(r["bytes_ratio"] for r in rows) if rows else None,
    }
