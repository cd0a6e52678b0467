# -*- coding: utf-8 -*-
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Union, get_args, get_origin, get_type_hints

import yaml
from dotenv import load_dotenv

from app.core.errors import DevftError

METHODS = ("devft", "end2end")
GROUPINGS = ("spectral", "random", "even")
FUSIONS = ("dblf", "sum", "r_one")


class ConfigError(DevftError):
    """Validation failure; `field` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ModelSpec:
    layers: int = 16
    width: int = 16
    input_dim: int = 8
    output_dim: int = 4
    rank: int = 4
    # None -> 2 * rank, so alpha / rank = 2
    alpha: Optional[float] = None
    activation: str = "tanh"
    residual: bool = True
    layer_correlation: float = 0.8


@dataclass
class ScheduleSpec:
    # At most one capacity rule: explicit list, growth rule, or stage count (halving from the top).
    capacities: Optional[List[int]] = None
    initial_capacity: Optional[int] = None
    growth: Optional[int] = None
    stages: Optional[int] = None
    # At most one round rule; neither -> 10 rounds per stage.
    rounds_per_stage: Optional[Union[int, List[int]]] = None
    total_rounds: Optional[int] = None
    # early stages barely move the adapters; the full-depth stage runs at lr_final
    lr_initial: float = 5e-6
    lr_factor: float = 10.0
    lr_final: float = 5e-3
    local_steps: int = 10
    batch_size: int = 16
    client_fraction: float = 0.1
    weight_decay: float = 0.0


@dataclass
class DataSpec:
    clients: int = 20
    samples_per_client: int = 256
    skew: float = 0.5
    noise: float = 1.0
    task_shift: float = 0.25
    components: int = 4
    test_samples: int = 512


@dataclass
class AlgorithmSpec:
    method: str = "devft"
    grouping: str = "spectral"
    fusion: str = "dblf"
    beta: float = 0.1


@dataclass
class RuntimeSpec:
    workers: int = 1
    out_dir: str = "runs/latest"


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    data: DataSpec = field(default_factory=DataSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    runtime: RuntimeSpec = field(default_factory=RuntimeSpec)
    # optional loss threshold for "bytes to reach target" reporting
    target_loss: Optional[float] = None


def _load_yaml_config(path: str) -> Dict[str, Any]:
    """
    Load a YAML (or JSON, a YAML subset) config file. Always returns a dict.
    """
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigError("config", f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError("config", f"cannot parse {path}: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"top level of {path} must be a mapping")
    return data


def _dot_set(d: Dict[str, Any], path: str, value: Any) -> None:
    """
    Set a nested value by dot-path, creating intermediate dicts.
    """
    cur = d
    parts = path.split(".")
    for p in parts[:-1]:
        nxt = cur.get(p)
        if not isinstance(nxt, dict):
            nxt = {}
            cur[p] = nxt
        cur = nxt
    cur[parts[-1]] = value


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        args = get_args(hint)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ConfigError:
                continue
        raise ConfigError(path, f"unexpected value {value!r}")
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (item,) = get_args(hint)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return _build(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {hint}")


def _build(cls, data: Mapping[str, Any], prefix: str = ""):
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(path, "unknown field")
        kwargs[key] = _coerce(value, hints[key], path)
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def halving_capacities(layers: int, stages: int) -> List[int]:
    """{L/2^(S-1), ..., L/2, L}."""
    return [layers // (2 ** (stages - 1 - s)) for s in range(stages)]


def capacities_from_growth(layers: int, initial: int, growth: int) -> List[int]:
    """initial, initial*m, ... with the final jump clamped to L."""
    if initial < 1 or initial > layers:
        raise ConfigError("schedule.initial_capacity", f"must be in [1, {layers}], got {initial}")
    if growth < 2:
        raise ConfigError("schedule.growth", f"multiplier must be >= 2, got {growth}")
    caps = [initial]
    while caps[-1] < layers:
        caps.append(min(caps[-1] * growth, layers))
    return caps


def resolve_capacities(cfg: ExperimentConfig) -> List[int]:
    sch = cfg.schedule
    layers = cfg.model.layers
    rules = [
        name for name, val in (
            ("capacities", sch.capacities),
            ("initial_capacity", sch.initial_capacity),
            ("stages", sch.stages),
        ) if val is not None
    ]
    if len(rules) > 1:
        raise ConfigError(f"schedule.{rules[1]}", f"conflicts with schedule.{rules[0]}; give one capacity rule")
    if sch.growth is not None and sch.initial_capacity is None:
        raise ConfigError("schedule.growth", "requires schedule.initial_capacity")
    if sch.capacities is not None:
        return list(sch.capacities)
    if sch.initial_capacity is not None:
        return capacities_from_growth(layers, sch.initial_capacity, sch.growth or 2)
    stages = 4 if sch.stages is None else sch.stages
    if stages < 1:
        raise ConfigError("schedule.stages", f"must be positive, got {stages}")
    if layers % (2 ** (stages - 1)) != 0:
        raise ConfigError("schedule.stages", f"{stages} halving stages need L divisible by {2 ** (stages - 1)}, L={layers}")
    return halving_capacities(layers, stages)


def resolve_rounds(cfg: ExperimentConfig, stages: int) -> List[int]:
    sch = cfg.schedule
    if sch.rounds_per_stage is not None and sch.total_rounds is not None:
        raise ConfigError("schedule.total_rounds", "conflicts with schedule.rounds_per_stage")
    if sch.total_rounds is not None:
        if sch.total_rounds < stages:
            raise ConfigError("schedule.total_rounds", f"must be at least the stage count {stages}")
        base, extra = divmod(sch.total_rounds, stages)
        return [base + (1 if s < extra else 0) for s in range(stages)]
    rps = 10 if sch.rounds_per_stage is None else sch.rounds_per_stage
    if isinstance(rps, list):
        if len(rps) != stages:
            raise ConfigError("schedule.rounds_per_stage", f"has {len(rps)} entries for {stages} stages")
        return list(rps)
    return [rps] * stages


def validate_config(cfg: ExperimentConfig) -> None:
    m, sch, d, alg, rt = cfg.model, cfg.schedule, cfg.data, cfg.algorithm, cfg.runtime
    if cfg.seed < 0:
        raise ConfigError("seed", f"must be non-negative, got {cfg.seed}")
    for name in ("layers", "width", "input_dim", "output_dim", "rank"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name}", "must be positive")
    if m.rank > m.width:
        raise ConfigError("model.rank", f"must not exceed width {m.width}")
    if m.alpha is not None and m.alpha <= 0:
        raise ConfigError("model.alpha", "must be positive")
    if m.activation not in ("tanh", "linear", "relu"):
        raise ConfigError("model.activation", f"unknown activation {m.activation!r}")
    if not 0.0 <= m.layer_correlation < 1.0:
        raise ConfigError("model.layer_correlation", "must be in [0, 1)")

    caps = resolve_capacities(cfg)
    if any(c < 1 for c in caps):
        raise ConfigError("schedule.capacities", f"must be positive: {caps}")
    if any(b <= a for a, b in zip(caps, caps[1:])):
        raise ConfigError("schedule.capacities", f"must be strictly increasing: {caps}")
    if caps[-1] != m.layers:
        raise ConfigError("schedule.capacities", f"last capacity {caps[-1]} must equal model.layers {m.layers}")
    rounds = resolve_rounds(cfg, len(caps))
    if any(t < 1 for t in rounds):
        raise ConfigError("schedule.rounds_per_stage", f"must be positive: {rounds}")
    for name in ("lr_initial", "lr_final", "lr_factor"):
        if getattr(sch, name) <= 0:
            raise ConfigError(f"schedule.{name}", "must be positive")
    if sch.local_steps < 1:
        raise ConfigError("schedule.local_steps", "must be positive")
    if sch.batch_size < 1:
        raise ConfigError("schedule.batch_size", "must be positive")
    if not 0.0 < sch.client_fraction <= 1.0:
        raise ConfigError("schedule.client_fraction", "must be in (0, 1]")
    if sch.weight_decay < 0:
        raise ConfigError("schedule.weight_decay", "must be non-negative")

    for name in ("clients", "samples_per_client", "components", "test_samples"):
        if getattr(d, name) < 1:
            raise ConfigError(f"data.{name}", "must be positive")
    if d.skew <= 0:
        raise ConfigError("data.skew", f"must be positive, got {d.skew}")
    if d.noise < 0 or d.task_shift < 0:
        raise ConfigError("data.noise" if d.noise < 0 else "data.task_shift", "must be non-negative")

    if alg.method not in METHODS:
        raise ConfigError("algorithm.method", f"expected one of {', '.join(METHODS)}, got {alg.method!r}")
    if alg.grouping not in GROUPINGS:
        raise ConfigError("algorithm.grouping", f"expected one of {', '.join(GROUPINGS)}, got {alg.grouping!r}")
    if alg.fusion not in FUSIONS:
        raise ConfigError("algorithm.fusion", f"expected one of {', '.join(FUSIONS)}, got {alg.fusion!r}")
    if rt.workers < 1:
        raise ConfigError("runtime.workers", "must be positive")


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Defaults < config file (--config or DEVFT_CONFIG) < environment < overrides (dot-path keys).
    """
    load_dotenv()

    config_path = (path or os.getenv("DEVFT_CONFIG") or "").strip()
    data = _load_yaml_config(config_path)

    seed_env = os.getenv("DEVFT_SEED")
    if seed_env:
        try:
            _dot_set(data, "seed", int(seed_env))
        except ValueError:
            raise ConfigError("seed", f"DEVFT_SEED is not an integer: {seed_env!r}")
    workers_env = os.getenv("DEVFT_WORKERS")
    if workers_env:
        try:
            _dot_set(data, "runtime.workers", int(workers_env))
        except ValueError:
            raise ConfigError("runtime.workers", f"DEVFT_WORKERS is not an integer: {workers_env!r}")
    out_env = os.getenv("DEVFT_OUT")
    if out_env:
        _dot_set(data, "runtime.out_dir", out_env)

    for key, value in (overrides or {}).items():
        if value is not None:
            _dot_set(data, key, value)
    return config_from_dict(data)


def with_overrides(cfg: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Re-validated copy of cfg with dot-path keys replaced (None values included)."""
    data = config_to_dict(cfg)
    for key, value in overrides.items():
        _dot_set(data, key, value)
    return config_from_dict(data)
