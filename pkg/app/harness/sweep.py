# -*- coding: utf-8 -*-
"""
One-axis parameter sweeps over a config template.
"""
import logging
from functools import partial
from typing import Any, Dict, List, Optional, Sequence

from app.core.config import FUSIONS, GROUPINGS, ConfigError, ExperimentConfig, resolve_capacities, with_overrides
from app.harness.experiment import run_experiment
from app.infra.client_pool import ClientPool

log = logging.getLogger("sweep")

AXES = ("initial_capacity", "growth_rate", "grouping", "fusion", "beta")

SWEEP_CSV_FIELDS = (
    "axis",
    "value",
    "capacities",
    "final_loss",
    "final_test_loss",
    "total_bytes",
    "total_compute_units",
)


def parse_axis_values(axis: str, text: str) -> List[Any]:
    """'2,4,8' -> [2, 4, 8] for integer axes, floats for beta, names for strategies."""
    if axis not in AXES:
        raise ConfigError("axis", f"expected one of {', '.join(AXES)}, got {axis!r}")
    items = [t.strip() for t in (text or "").split(",") if t.strip()]
    if not items:
        raise ConfigError("values", "no sweep values given")
    try:
        if axis in ("initial_capacity", "growth_rate"):
            return [int(t) for t in items]
        if axis == "beta":
            return [float(t) for t in items]
    except ValueError:
        raise ConfigError("values", f"cannot parse {text!r} for axis {axis}")
    return items


def point_config(template: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Template with one axis set; capacity axes replace whatever capacity rule the template had."""
    if axis == "initial_capacity":
        growth = template.schedule.growth or 2
        overrides = _capacity_rule(int(value), growth)
    elif axis == "growth_rate":
        initial = template.schedule.initial_capacity or resolve_capacities(template)[0]
        overrides = _capacity_rule(initial, int(value))
    elif axis == "grouping":
        if value not in GROUPINGS:
            raise ConfigError("algorithm.grouping", f"expected one of {', '.join(GROUPINGS)}, got {value!r}")
        overrides = {"algorithm.grouping": value}
    elif axis == "fusion":
        if value not in FUSIONS:
            raise ConfigError("algorithm.fusion", f"expected one of {', '.join(FUSIONS)}, got {value!r}")
        overrides = {"algorithm.fusion": value}
    elif axis == "beta":
        overrides = {"algorithm.beta": float(value)}
    else:
        raise ConfigError("axis", f"expected one of {', '.join(AXES)}, got {axis!r}")
    cfg = with_overrides(template, overrides)
    if isinstance(cfg.schedule.rounds_per_stage, list):
        stages = len(resolve_capacities(cfg))
        if len(cfg.schedule.rounds_per_stage) != stages:
            raise ConfigError("schedule.rounds_per_stage", f"per-stage list cannot follow a sweep to {stages} stages")
    return cfg


def _capacity_rule(initial: int, growth: int) -> Dict[str, Any]:
    return {
        "schedule.capacities": None,
        "schedule.stages": None,
        "schedule.initial_capacity": initial,
        "schedule.growth": growth,
    }


def _run_point(cfg: ExperimentConfig, axis: str, value: Any) -> Dict[str, Any]:
    # points may already run concurrently; keep each run's clients inline
    result = run_experiment(cfg, ClientPool(1))
    s = result.summary
    return {
        "axis": axis,
        "value": value,
        "capacities": "-".join(str(c) for c in s["capacities"]),
        "final_loss": s["final_loss"],
        "final_test_loss": s["final_test_loss"],
        "total_bytes": s["total_bytes"],
        "total_compute_units": s["total_compute_units"],
        "summary": s,
    }


def sweep(
    template: ExperimentConfig,
    axis: str,
    values: Sequence[Any],
    pool: Optional[ClientPool] = None,
) -> List[Dict[str, Any]]:
    """
    One run per value with the template's seed. Rows come back in value order;
    each row carries the table columns and the full run summary under "summary".
    """
    if axis not in AXES:
        raise ConfigError("axis", f"expected one of {', '.join(AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("values", "no sweep values given")
    # validate every point before running any
    configs = [point_config(template, axis, v) for v in values]
    pool = pool or ClientPool(template.runtime.workers)
    log.info("Sweep %s over %s (%d points, workers=%d)", axis, list(values), len(values), pool.max_workers)
    rows = pool.run([partial(_run_point, cfg, axis, v) for cfg, v in zip(configs, values)])
    for row in rows:
        log.info(
            "Sweep point %s=%s: capacities=%s final_loss=%.6g bytes=%d",
            axis, row["value"], row["capacities"], row["final_loss"], row["total_bytes"],
        )
    return rows
