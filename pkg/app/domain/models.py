# -*- coding: utf-8 -*-
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

ACTIVATIONS = ("tanh", "linear", "relu")

# Wire convention for accounting: every transmitted/resident real is 32-bit.
WIRE_BYTES_PER_REAL = 4


def _frozen(a: np.ndarray) -> np.ndarray:
    if isinstance(a, np.ndarray) and a.dtype == np.float64 and not a.flags.writeable:
        return a
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass
class LoraAdapter:
    A: np.ndarray  # r x d_in
    B: np.ndarray  # d_out x r
    alpha: float

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def size(self) -> int:
        return int(self.A.size + self.B.size)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(A=self.A.copy(), B=self.B.copy(), alpha=self.alpha)


@dataclass(frozen=True)
class LayerShape:
    """Shape of one layer; enough to unflatten a layer vector."""
    d_in: int
    d_out: int
    rank: int
    alpha: float
    activation: str = "tanh"

    @property
    def size(self) -> int:
        return self.d_out * self.d_in + self.d_out + self.rank * self.d_in + self.d_out * self.rank

    @property
    def adapter_size(self) -> int:
        return self.rank * self.d_in + self.d_out * self.rank


@dataclass
class LayerParams:
    W: np.ndarray  # d_out x d_in, frozen
    b: np.ndarray  # d_out, frozen
    adapter: LoraAdapter
    activation: str = "tanh"
    # Checkpoint metadata, e.g. {"group_id": 0, "beta": 0.1, "strategy": "dblf"} for fused layers
    origin: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        # Base tensors are read-only for the lifetime of the layer.
        self.W = _frozen(self.W)
        self.b = _frozen(self.b)

    @property
    def d_in(self) -> int:
        return int(self.W.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.W.shape[0])

    @property
    def shape(self) -> LayerShape:
        return LayerShape(
            d_in=self.d_in,
            d_out=self.d_out,
            rank=self.adapter.rank,
            alpha=self.adapter.alpha,
            activation=self.activation,
        )

    def copy(self) -> "LayerParams":
        # Base arrays are immutable and shared; only the adapter is duplicated.
        return LayerParams(
            W=self.W,
            b=self.b,
            adapter=self.adapter.copy(),
            activation=self.activation,
            origin=dict(self.origin) if self.origin else None,
        )


@dataclass
class LayeredModel:
    input_map: np.ndarray  # width x input_dim, frozen
    layers: List[LayerParams]
    head: np.ndarray  # output_dim x width, frozen
    residual: bool = True
    seed: int = 0

    def __post_init__(self):
        self.input_map = _frozen(self.input_map)
        self.head = _frozen(self.head)

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return int(self.input_map.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.head.shape[0])

    @property
    def width(self) -> int:
        return int(self.input_map.shape[0])

    def copy(self) -> "LayeredModel":
        return LayeredModel(
            input_map=self.input_map,
            layers=[layer.copy() for layer in self.layers],
            head=self.head,
            residual=self.residual,
            seed=self.seed,
        )


@dataclass
class LayerGrad:
    A: np.ndarray
    B: np.ndarray


@dataclass
class OptimizerState:
    """AdamW state; moment lists mirror the model's adapters layer by layer."""
    m_A: List[np.ndarray]
    v_A: List[np.ndarray]
    m_B: List[np.ndarray]
    v_B: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class EigenResult:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns, same order
    sweeps: int = 0


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    distortion: float = 0.0
    iterations: int = 0
    # distortion after every centroid update
    history: List[float] = field(default_factory=list)


@dataclass
class GroupPartition:
    """
    Disjoint covering assignment of layer indices to groups.
    Members are kept sorted, groups ordered by anchor (smallest member).
    """
    groups: List[List[int]]

    def __post_init__(self):
        groups = [sorted(int(i) for i in g) for g in self.groups]
        self.groups = sorted(groups, key=lambda g: g[0] if g else -1)

    @classmethod
    def from_labels(cls, labels) -> "GroupPartition":
        by_label: Dict[int, List[int]] = {}
        for idx, lab in enumerate(labels):
            by_label.setdefault(int(lab), []).append(idx)
        return cls(groups=list(by_label.values()))

    @classmethod
    def singletons(cls, n: int) -> "GroupPartition":
        return cls(groups=[[i] for i in range(n)])

    @property
    def size(self) -> int:
        return len(self.groups)

    @property
    def anchors(self) -> List[int]:
        return [g[0] for g in self.groups]

    def labels(self, n: int) -> np.ndarray:
        out = np.full(n, -1, dtype=np.int64)
        for gid, g in enumerate(self.groups):
            out[g] = gid
        return out

    def to_json(self) -> List[List[int]]:
        return [list(g) for g in self.groups]


@dataclass
class StageSchedule:
    capacities: List[int]
    rounds: List[int]
    lrs: List[float]  # per-stage base learning rate
    beta: float = 0.1
    local_steps: int = 10
    client_fraction: float = 0.1
    batch_size: int = 16
    weight_decay: float = 0.0
    grouping: str = "spectral"
    fusion: str = "dblf"

    @property
    def stages(self) -> int:
        return len(self.capacities)

    @property
    def total_rounds(self) -> int:
        return int(sum(self.rounds))


@dataclass
class Client:
    id: int
    inputs: np.ndarray  # n x input_dim
    targets: np.ndarray  # n x output_dim

    @property
    def sample_count(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class LocalUpdate:
    client_id: int
    adapters: List[Tuple[np.ndarray, np.ndarray]]  # (A, B) per layer
    sample_count: int


ROUND_CSV_FIELDS = (
    "stage",
    "round",
    "loss",
    "grad_norm_sq",
    "uplink_bytes",
    "downlink_bytes",
    "compute_units",
    "memory_bytes",
)


@dataclass
class RoundRecord:
    stage: int
    round: int
    loss: float
    grad_norm_sq: float
    uplink_bytes: int
    downlink_bytes: int
    compute_units: int
    memory_bytes: int = 0

    def as_row(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ShiftReport:
    beta: float
    group_sizes: List[int]
    shifts: List[float]
    bounds: List[float]
    deltas: List[float]  # max pairwise distance per group
    total_shift: float
    total_bound: float
    violations: List[int] = field(default_factory=list)
    # statement-side constant C implied by this instance; None when undefined
    implied_constant: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class StageRecord:
    stage: int
    capacity: int
    rounds: int
    lr: float
    partition: List[List[int]]
    broadcast_bytes: int
    shift: Optional[Dict[str, Any]] = None
    test_loss: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunMetrics:
    records: List[RoundRecord] = field(default_factory=list)
    stages: List[StageRecord] = field(default_factory=list)

    def append(self, record: RoundRecord) -> None:
        self.records.append(record)

    @property
    def total_uplink(self) -> int:
        return sum(r.uplink_bytes for r in self.records)

    @property
    def total_downlink(self) -> int:
        return sum(r.downlink_bytes for r in self.records)

    @property
    def total_bytes(self) -> int:
        return self.total_uplink + self.total_downlink

    @property
    def total_compute(self) -> int:
        return sum(r.compute_units for r in self.records)

    @property
    def peak_memory(self) -> int:
        return max((r.memory_bytes for r in self.records), default=0)

    @property
    def final_loss(self) -> Optional[float]:
        return self.records[-1].loss if self.records else None


@dataclass
class TargetTask:
    """
    Synthetic regression task: targets come from a hidden reference network.
    """
    reference: LayeredModel
    noise: float
    means: np.ndarray  # components x input_dim mixture means
    seed: int
