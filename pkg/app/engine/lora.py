# -*- coding: utf-8 -*-
"""
Layered residual MLP with frozen base weights and trainable low-rank adapters.

Layer i computes  h <- h + act(W_eff·h + b)  with  W_eff = W + (alpha/r)·B·A.
Gradients are derived by hand and flow to A and B only.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DevftError
from app.domain.models import (
    ACTIVATIONS,
    LayeredModel,
    LayerGrad,
    LayerParams,
    LayerShape,
    LoraAdapter,
    OptimizerState,
)
from app.utils.seeding import STREAM_ADAPTER, STREAM_MODEL, derive_rng

log = logging.getLogger("lora")


class ModelError(DevftError):
    pass


@dataclass
class ForwardCache:
    hidden: List[np.ndarray]  # h_0 .. h_L, each n x width
    pre: List[np.ndarray]  # z_1 .. z_L
    effective: List[np.ndarray]  # W_eff per layer


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    raise ModelError(f"unknown activation: {name}")


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "linear":
        return np.ones_like(z)
    raise ModelError(f"unknown activation: {name}")


def init_adapter(d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    """A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0, so the adapter starts as a no-op."""
    if rank < 1 or rank > min(d_in, d_out):
        raise ModelError(f"rank {rank} outside [1, {min(d_in, d_out)}]")
    bound = 1.0 / np.sqrt(d_in)
    return LoraAdapter(
        A=rng.uniform(-bound, bound, size=(rank, d_in)),
        B=np.zeros((d_out, rank)),
        alpha=float(alpha),
    )


def build_model(
    layers: int,
    width: int,
    input_dim: int,
    output_dim: int,
    rank: int,
    alpha: Optional[float] = None,
    activation: str = "tanh",
    residual: bool = True,
    layer_correlation: float = 0.8,
    seed: int = 0,
) -> LayeredModel:
    """
    Random "pretrained" model. Base weights drift with depth:
    W_{i+1} = rho·W_i + sqrt(1-rho^2)·noise, so nearby layers look alike.
    """
    if layers < 1 or width < 1 or input_dim < 1 or output_dim < 1:
        raise ModelError("layer count and dimensions must be positive")
    if activation not in ACTIVATIONS:
        raise ModelError(f"unknown activation: {activation}")
    if not 0.0 <= layer_correlation < 1.0:
        raise ModelError(f"layer_correlation must be in [0, 1), got {layer_correlation}")
    alpha = float(2 * rank if alpha is None else alpha)
    rng = derive_rng(seed, STREAM_MODEL)
    adapter_rng = derive_rng(seed, STREAM_ADAPTER)

    std = 1.0 / np.sqrt(width)
    rho = layer_correlation
    keep = np.sqrt(1.0 - rho * rho)
    w = rng.normal(0.0, std, size=(width, width))
    b = rng.normal(0.0, 0.1, size=width)
    stack: List[LayerParams] = []
    for i in range(layers):
        if i > 0:
            w = rho * w + keep * rng.normal(0.0, std, size=(width, width))
            b = rho * b + keep * rng.normal(0.0, 0.1, size=width)
        stack.append(
            LayerParams(
                W=w,
                b=b,
                adapter=init_adapter(width, width, rank, alpha, adapter_rng),
                activation=activation,
            )
        )
    return LayeredModel(
        input_map=rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(width, input_dim)),
        layers=stack,
        head=rng.normal(0.0, std, size=(output_dim, width)),
        residual=residual,
        seed=seed,
    )


def effective_weight(layer: LayerParams) -> np.ndarray:
    a = layer.adapter
    return layer.W + a.scale * (a.B @ a.A)


def _check_batch(model: LayeredModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ModelError(f"input dimension mismatch: expected {model.input_dim}, got shape {x.shape}")
    return x


def forward(model: LayeredModel, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Batch rows are samples. Returns predictions (n x output_dim) and the backprop cache."""
    x = _check_batch(model, x)
    h = x @ model.input_map.T
    cache = ForwardCache(hidden=[h], pre=[], effective=[])
    for layer in model.layers:
        w_eff = effective_weight(layer)
        if w_eff.shape[1] != h.shape[1]:
            raise ModelError(f"layer shapes do not compose: {w_eff.shape} after width {h.shape[1]}")
        z = h @ w_eff.T + layer.b
        out = _act(layer.activation, z)
        h = h + out if model.residual else out
        cache.pre.append(z)
        cache.effective.append(w_eff)
        cache.hidden.append(h)
    return h @ model.head.T, cache


def predict(model: LayeredModel, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[0]


def mse(model: LayeredModel, x: np.ndarray, y: np.ndarray) -> float:
    pred = predict(model, x)
    return float(np.mean((pred - np.asarray(y, dtype=np.float64)) ** 2))


def loss_and_grads(model: LayeredModel, x: np.ndarray, y: np.ndarray) -> Tuple[float, List[LayerGrad]]:
    """
    Mean squared error over all output entries and its gradient w.r.t. every A and B.
    No gradient is produced for W, b, the input map or the head.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ModelError("empty batch")
    x = _check_batch(model, x)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    pred, cache = forward(model, x)
    if y.shape != pred.shape:
        raise ModelError(f"target shape {y.shape} does not match predictions {pred.shape}")
    diff = pred - y
    loss = float(np.mean(diff * diff))

    d_h = (2.0 / diff.size) * diff @ model.head
    grads: List[Optional[LayerGrad]] = [None] * model.L
    for i in range(model.L - 1, -1, -1):
        layer = model.layers[i]
        d_z = d_h * _act_grad(layer.activation, cache.pre[i])
        d_w = d_z.T @ cache.hidden[i]
        s = layer.adapter.scale
        grads[i] = LayerGrad(A=s * (layer.adapter.B.T @ d_w), B=s * (d_w @ layer.adapter.A.T))
        d_prev = d_z @ cache.effective[i]
        d_h = d_h + d_prev if model.residual else d_prev
    return loss, grads  # type: ignore[return-value]


def grad_norm_sq(grads: Sequence[LayerGrad]) -> float:
    return float(sum(np.sum(g.A * g.A) + np.sum(g.B * g.B) for g in grads))


def init_optimizer(
    model: LayeredModel,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    return OptimizerState(
        m_A=[np.zeros_like(layer.adapter.A) for layer in model.layers],
        v_A=[np.zeros_like(layer.adapter.A) for layer in model.layers],
        m_B=[np.zeros_like(layer.adapter.B) for layer in model.layers],
        v_B=[np.zeros_like(layer.adapter.B) for layer in model.layers],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def _adamw(p, g, m, v, state: OptimizerState, step: int):
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    p = p - state.lr * state.weight_decay * p
    p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return p, m, v


def optimizer_step(
    state: OptimizerState,
    model: LayeredModel,
    grads: Sequence[LayerGrad],
) -> Tuple[LayeredModel, OptimizerState]:
    """
    One AdamW step (decoupled weight decay, bias-corrected) on adapter parameters.
    Returns new model and state; the inputs are left as they were.
    """
    if len(grads) != model.L or len(state.m_A) != model.L:
        raise ModelError(f"gradient/state arity mismatch: model has {model.L} layers, got {len(grads)} grads")
    step = state.step + 1
    new_model = model.copy()
    new_state = OptimizerState(
        m_A=[], v_A=[], m_B=[], v_B=[], step=step,
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, weight_decay=state.weight_decay,
    )
    for i, (layer, g) in enumerate(zip(new_model.layers, grads)):
        ad = layer.adapter
        if g.A.shape != ad.A.shape or g.B.shape != ad.B.shape:
            raise ModelError(f"gradient shape mismatch at layer {i}")
        ad.A, m_a, v_a = _adamw(ad.A, g.A, state.m_A[i], state.v_A[i], state, step)
        ad.B, m_b, v_b = _adamw(ad.B, g.B, state.m_B[i], state.v_B[i], state, step)
        new_state.m_A.append(m_a)
        new_state.v_A.append(v_a)
        new_state.m_B.append(m_b)
        new_state.v_B.append(v_b)
    return new_model, new_state


def flatten_layer(layer: LayerParams) -> np.ndarray:
    """vec(W) row-major, then b, vec(A), vec(B). alpha and r are metadata."""
    return np.concatenate([
        layer.W.ravel(),
        layer.b.ravel(),
        layer.adapter.A.ravel(),
        layer.adapter.B.ravel(),
    ])


def unflatten_layer(v: np.ndarray, shape: LayerShape) -> LayerParams:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != shape.size:
        raise ModelError(f"layer vector length {v.size} does not match shape total {shape.size}")
    d_in, d_out, r = shape.d_in, shape.d_out, shape.rank
    w = v[:d_out * d_in].reshape(d_out, d_in)
    b = v[d_out * d_in:d_out * d_in + d_out]
    seg = v[adapter_segment(shape)]
    a = seg[:r * d_in].reshape(r, d_in)
    bb = seg[r * d_in:].reshape(d_out, r)
    return LayerParams(
        W=w.copy(),
        b=b.copy(),
        adapter=LoraAdapter(A=a.copy(), B=bb.copy(), alpha=shape.alpha),
        activation=shape.activation,
    )


def adapter_segment(shape: LayerShape) -> slice:
    """Position of the adapter (A then B) inside a flattened layer vector."""
    start = shape.d_out * shape.d_in + shape.d_out
    return slice(start, start + shape.adapter_size)


def base_checksum(model: LayeredModel) -> str:
    h = hashlib.sha256()
    for arr in [model.input_map, model.head]:
        h.update(np.ascontiguousarray(arr).tobytes())
    for layer in model.layers:
        h.update(np.ascontiguousarray(layer.W).tobytes())
        h.update(np.ascontiguousarray(layer.b).tobytes())
    return h.hexdigest()


def model_checksum(model: LayeredModel) -> str:
    h = hashlib.sha256(base_checksum(model).encode("ascii"))
    for layer in model.layers:
        h.update(np.ascontiguousarray(layer.adapter.A).tobytes())
        h.update(np.ascontiguousarray(layer.adapter.B).tobytes())
    return h.hexdigest()


def get_adapters(model: LayeredModel) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(layer.adapter.A.copy(), layer.adapter.B.copy()) for layer in model.layers]


def set_adapters(model: LayeredModel, adapters: Sequence[Tuple[np.ndarray, np.ndarray]]) -> LayeredModel:
    """Copy of model with the given (A, B) pairs installed layer by layer."""
    if len(adapters) != model.L:
        raise ModelError(f"adapter arity mismatch: model has {model.L} layers, got {len(adapters)}")
    out = model.copy()
    for layer, (a, b) in zip(out.layers, adapters):
        if a.shape != layer.adapter.A.shape or b.shape != layer.adapter.B.shape:
            raise ModelError("adapter shape mismatch")
        layer.adapter.A = np.array(a, dtype=np.float64)
        layer.adapter.B = np.array(b, dtype=np.float64)
    return out
