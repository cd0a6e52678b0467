# -*- coding: utf-8 -*-
"""
Staged federated training engine: client sampling, local AdamW steps,
FedAvg-style adapter aggregation, knowledge transfer and resource accounting.
"""
import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DevftError
from app.domain.models import (
    WIRE_BYTES_PER_REAL,
    Client,
    GroupPartition,
    LayeredModel,
    LocalUpdate,
    RoundRecord,
    RunMetrics,
    StageRecord,
    StageSchedule,
)
from app.engine.analysis import verify_lemma1
from app.engine.fusion import build_submodel
from app.engine.grouping import grouping_strategy, validate_partition
from app.engine.lora import (
    get_adapters,
    grad_norm_sq,
    init_optimizer,
    loss_and_grads,
    mse,
    optimizer_step,
    set_adapters,
)
from app.infra.client_pool import ClientPool
from app.utils.seeding import (
    STREAM_FUSION,
    STREAM_GROUPING,
    STREAM_LOCAL,
    STREAM_SAMPLING,
    derive_rng,
    derive_seed,
)

log = logging.getLogger("federation")

# forward pass + backward pass (two matmul-equivalents) per layer per sample
LAYER_UNIT_COST = 3


class FederationError(DevftError):
    pass


@dataclass
class ClientRound:
    update: LocalUpdate
    loss: float
    grad_norm_sq: float


def validate_schedule(schedule: StageSchedule, total_layers: int) -> None:
    caps = list(schedule.capacities)
    if not caps:
        raise FederationError("schedule has no stages")
    if len(schedule.rounds) != len(caps) or len(schedule.lrs) != len(caps):
        raise FederationError("capacities, rounds and lrs must have one entry per stage")
    if any(c < 1 for c in caps):
        raise FederationError(f"capacities must be positive: {caps}")
    if any(b <= a for a, b in zip(caps, caps[1:])):
        raise FederationError(f"capacities must be strictly increasing: {caps}")
    if caps[-1] != total_layers:
        raise FederationError(f"final capacity {caps[-1]} must equal the model depth {total_layers}")
    if any(t < 1 for t in schedule.rounds):
        raise FederationError(f"round counts must be positive: {schedule.rounds}")
    if schedule.local_steps < 1 or schedule.batch_size < 1:
        raise FederationError("local_steps and batch_size must be positive")
    if not 0.0 < schedule.client_fraction <= 1.0:
        raise FederationError(f"client_fraction must be in (0, 1], got {schedule.client_fraction}")


def staged_learning_rates(lr_initial: float, factor: float, lr_final: float, stages: int) -> List[float]:
    """
    lr_s = lr_1 * factor^(s-1), capped at lr_final. The last stage trains the
    full-depth model and always runs at lr_final, so a one-stage schedule is
    end-to-end tuning at the full-model rate.
    """
    if stages < 1:
        raise FederationError(f"stage count must be positive, got {stages}")
    return [min(lr_initial * factor ** s, lr_final) for s in range(stages - 1)] + [lr_final]


def cosine_lr(base_lr: float, round_idx: int, rounds: int) -> float:
    """Cosine decay within a stage; restarts at base_lr every stage."""
    if rounds <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * round_idx / rounds))


def participant_count(n_clients: int, fraction: float) -> int:
    # round() absorbs representation error, e.g. 0.1 * 20
    return max(1, math.ceil(round(fraction * n_clients, 9)))


def sample_clients(rng: np.random.Generator, clients: Sequence[Client], fraction: float) -> List[Client]:
    """ceil(fraction * N) distinct clients, returned in id order."""
    if not clients:
        raise FederationError("empty client list")
    if not 0.0 < fraction <= 1.0:
        raise FederationError(f"client fraction must be in (0, 1], got {fraction}")
    m = participant_count(len(clients), fraction)
    picks = rng.choice(len(clients), size=m, replace=False)
    return sorted((clients[int(i)] for i in picks), key=lambda c: c.id)


def local_train(
    client: Client,
    submodel: LayeredModel,
    local_steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    weight_decay: float = 0.0,
) -> LocalUpdate:
    """K AdamW steps on minibatches of the client's data, on a private copy of the submodel."""
    if local_steps < 1:
        raise FederationError(f"local_steps must be >= 1, got {local_steps}")
    model = submodel.copy()
    state = init_optimizer(model, lr=lr, weight_decay=weight_decay)
    n = client.sample_count
    size = min(batch_size, n)
    for _ in range(local_steps):
        idx = rng.choice(n, size=size, replace=False)
        _, grads = loss_and_grads(model, client.inputs[idx], client.targets[idx])
        model, state = optimizer_step(state, model, grads)
    return LocalUpdate(client_id=client.id, adapters=get_adapters(model), sample_count=n)


def _client_round(
    client: Client,
    submodel: LayeredModel,
    schedule: StageSchedule,
    lr: float,
    rng: np.random.Generator,
) -> ClientRound:
    loss, grads = loss_and_grads(submodel, client.inputs, client.targets)
    update = local_train(client, submodel, schedule.local_steps, lr, schedule.batch_size, rng, schedule.weight_decay)
    return ClientRound(update=update, loss=loss, grad_norm_sq=grad_norm_sq(grads))


def aggregate(updates: Sequence[LocalUpdate]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Sample-count weighted mean, independently for every A and every B."""
    if not updates:
        raise FederationError("no updates to aggregate")
    n_layers = len(updates[0].adapters)
    for u in updates[1:]:
        if len(u.adapters) != n_layers:
            raise FederationError(f"client {u.client_id} sent {len(u.adapters)} adapters, expected {n_layers}")
        for (a, b), (a0, b0) in zip(u.adapters, updates[0].adapters):
            if a.shape != a0.shape or b.shape != b0.shape:
                raise FederationError(f"client {u.client_id} sent adapters of mismatched shape")
    total = float(sum(u.sample_count for u in updates))
    weights = [u.sample_count / total for u in updates]
    out = []
    for i in range(n_layers):
        a = sum(w * u.adapters[i][0] for w, u in zip(weights, updates))
        b = sum(w * u.adapters[i][1] for w, u in zip(weights, updates))
        out.append((np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    return out


def knowledge_transfer(model: LayeredModel, submodel: LayeredModel, partition: GroupPartition) -> LayeredModel:
    """Every layer of group n takes the adapter of submodel layer n. Base weights stay."""
    if submodel.L != partition.size:
        raise FederationError(f"submodel has {submodel.L} layers but partition has {partition.size} groups")
    validate_partition(partition, model.L)
    out = model.copy()
    for gid, group in enumerate(partition.groups):
        src = submodel.layers[gid].adapter
        for idx in group:
            out.layers[idx].adapter = src.copy()
    return out


def adapter_bytes(model: LayeredModel) -> int:
    return sum(layer.shape.adapter_size for layer in model.layers) * WIRE_BYTES_PER_REAL


def comm_bytes(submodel: LayeredModel, participants: int) -> Tuple[int, int]:
    """(uplink, downlink) adapter traffic of one round."""
    per_client = adapter_bytes(submodel)
    return participants * per_client, participants * per_client


def compute_units(submodel: LayeredModel, local_steps: int, batch: int, participants: int) -> int:
    """Depth-proportional FLOPs proxy for one round of local training."""
    return participants * local_steps * batch * LAYER_UNIT_COST * submodel.L


def memory_bytes(submodel: LayeredModel) -> int:
    """Device-resident bytes: base + adapters + two AdamW moments per adapter entry."""
    params = submodel.input_map.size + submodel.head.size
    params += sum(layer.shape.size for layer in submodel.layers)
    return (params + 2 * sum(layer.shape.adapter_size for layer in submodel.layers)) * WIRE_BYTES_PER_REAL


def broadcast_bytes(submodel: LayeredModel, n_clients: int) -> int:
    """One-time stage-start broadcast of the full submodel to every client."""
    params = submodel.input_map.size + submodel.head.size
    params += sum(layer.shape.size for layer in submodel.layers)
    return n_clients * params * WIRE_BYTES_PER_REAL


def build_stage_submodel(
    model: LayeredModel,
    schedule: StageSchedule,
    stage: int,
    run_seed: int,
) -> Tuple[GroupPartition, LayeredModel]:
    capacity = schedule.capacities[stage]
    if capacity == model.L:
        # identity partition: no grouping, no fusion
        return GroupPartition.singletons(model.L), model.copy()
    partition = grouping_strategy(model, capacity, schedule.grouping, derive_seed(run_seed, STREAM_GROUPING, stage))
    submodel = build_submodel(model, partition, schedule.beta, schedule.fusion, derive_seed(run_seed, STREAM_FUSION, stage))
    return partition, submodel


def run_stage(
    model: LayeredModel,
    schedule: StageSchedule,
    stage: int,
    clients: Sequence[Client],
    metrics: RunMetrics,
    run_seed: int = 0,
    pool: Optional[ClientPool] = None,
    test_set: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[LayeredModel, List[RoundRecord]]:
    """
    Build the stage submodel, run its rounds, transfer knowledge back.
    `stage` is 0-based; records carry 1-based stage and round numbers.
    """
    if not 0 <= stage < schedule.stages:
        raise FederationError(f"stage {stage} outside schedule of {schedule.stages} stages")
    if schedule.capacities[stage] > model.L:
        raise FederationError(f"capacity {schedule.capacities[stage]} exceeds model depth {model.L}")
    pool = pool or ClientPool(1)
    partition, submodel = build_stage_submodel(model, schedule, stage, run_seed)
    shift = verify_lemma1(model, partition, schedule.beta)
    rounds = schedule.rounds[stage]
    base_lr = schedule.lrs[stage]
    log.info(
        "Stage %d/%d: capacity=%d rounds=%d lr=%g groups=%s",
        stage + 1, schedule.stages, submodel.L, rounds, base_lr, partition.to_json(),
    )

    records: List[RoundRecord] = []
    for t in range(rounds):
        lr = cosine_lr(base_lr, t, rounds)
        participants = sample_clients(derive_rng(run_seed, STREAM_SAMPLING, stage, t), clients, schedule.client_fraction)
        jobs = [
            partial(_client_round, c, submodel, schedule, lr, derive_rng(run_seed, STREAM_LOCAL, stage, t, c.id))
            for c in participants
        ]
        results: List[ClientRound] = pool.run(jobs)
        # barrier: aggregation sees results in participant order
        submodel = set_adapters(submodel, aggregate([r.update for r in results]))
        uplink, downlink = comm_bytes(submodel, len(participants))
        batch = min(schedule.batch_size, min(c.sample_count for c in participants))
        record = RoundRecord(
            stage=stage + 1,
            round=t + 1,
            loss=float(np.mean([r.loss for r in results])),
            grad_norm_sq=float(np.mean([r.grad_norm_sq for r in results])),
            uplink_bytes=uplink,
            downlink_bytes=downlink,
            compute_units=compute_units(submodel, schedule.local_steps, batch, len(participants)),
            memory_bytes=memory_bytes(submodel),
        )
        log.debug("Round %d.%d: loss=%.6g grad_norm_sq=%.6g lr=%.3g", record.stage, record.round, record.loss, record.grad_norm_sq, lr)
        records.append(record)
        metrics.append(record)

    updated = knowledge_transfer(model, submodel, partition)
    test_loss = mse(updated, test_set[0], test_set[1]) if test_set is not None else None
    metrics.stages.append(
        StageRecord(
            stage=stage + 1,
            capacity=submodel.L,
            rounds=rounds,
            lr=base_lr,
            partition=partition.to_json(),
            broadcast_bytes=broadcast_bytes(submodel, len(clients)),
            shift=shift.to_dict(),
            test_loss=test_loss,
        )
    )
    return updated, records


def run_schedule(
    model: LayeredModel,
    schedule: StageSchedule,
    clients: Sequence[Client],
    run_seed: int = 0,
    pool: Optional[ClientPool] = None,
    test_set: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[LayeredModel, RunMetrics]:
    validate_schedule(schedule, model.L)
    metrics = RunMetrics()
    for stage in range(schedule.stages):
        model, _ = run_stage(model, schedule, stage, clients, metrics, run_seed, pool, test_set)
    log.info(
        "Schedule done: %d rounds, %d bytes, %d compute units, final loss %.6g",
        len(metrics.records), metrics.total_bytes, metrics.total_compute, metrics.final_loss or float("nan"),
    )
    return model, metrics
