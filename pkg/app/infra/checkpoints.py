# -*- coding: utf-8 -*-
import json
import logging
import os
from typing import Any, Dict

import numpy as np

from app.core.errors import DevftError
from app.domain.models import ACTIVATIONS, LayeredModel, LayerParams, LoraAdapter

log = logging.getLogger("checkpoints")

SCHEMA = "devft.model/1"


class CheckpointError(DevftError):
    pass


def model_to_dict(model: LayeredModel) -> Dict[str, Any]:
    # float -> JSON uses the shortest round-trip repr, so loading is bitwise exact
    layers = []
    for layer in model.layers:
        rec: Dict[str, Any] = {
            "W": layer.W.tolist(),
            "b": layer.b.tolist(),
            "A": layer.adapter.A.tolist(),
            "B": layer.adapter.B.tolist(),
            "alpha": layer.adapter.alpha,
            "rank": layer.adapter.rank,
            "activation": layer.activation,
        }
        if layer.origin:
            rec["origin"] = dict(layer.origin)
        layers.append(rec)
    return {
        "schema": SCHEMA,
        "seed": model.seed,
        "residual": model.residual,
        "input_map": model.input_map.tolist(),
        "head": model.head.tolist(),
        "layers": layers,
    }


def _matrix(value: Any, where: str, rows: int = -1, cols: int = -1) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise CheckpointError(f"{where}: not a numeric array")
    if arr.ndim != 2:
        raise CheckpointError(f"{where}: expected a matrix, got {arr.ndim} dimensions")
    if (rows >= 0 and arr.shape[0] != rows) or (cols >= 0 and arr.shape[1] != cols):
        raise CheckpointError(f"{where}: shape {arr.shape} does not fit ({rows}, {cols})")
    return arr


def model_from_dict(data: Dict[str, Any]) -> LayeredModel:
    if not isinstance(data, dict) or data.get("schema") != SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema: {data.get('schema') if isinstance(data, dict) else None!r}")
    try:
        input_map = _matrix(data["input_map"], "input_map")
        width = input_map.shape[0]
        head = _matrix(data["head"], "head", cols=width)
        layers = []
        for i, rec in enumerate(data["layers"]):
            where = f"layers[{i}]"
            rank = int(rec["rank"])
            if rec["activation"] not in ACTIVATIONS:
                raise CheckpointError(f"{where}.activation: unknown {rec['activation']!r}")
            w = _matrix(rec["W"], f"{where}.W", width, width)
            b = np.array(rec["b"], dtype=np.float64)
            if b.shape != (width,):
                raise CheckpointError(f"{where}.b: shape {b.shape} does not fit ({width},)")
            adapter = LoraAdapter(
                A=_matrix(rec["A"], f"{where}.A", rank, width),
                B=_matrix(rec["B"], f"{where}.B", width, rank),
                alpha=float(rec["alpha"]),
            )
            layers.append(LayerParams(W=w, b=b, adapter=adapter, activation=rec["activation"], origin=rec.get("origin")))
        return LayeredModel(
            input_map=input_map,
            layers=layers,
            head=head,
            residual=bool(data["residual"]),
            seed=int(data["seed"]),
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing field {e}")


def save_checkpoint(model: LayeredModel, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, sort_keys=True)
    os.replace(tmp_path, path)
    log.info("Checkpoint saved: %s (%d layers)", path, model.L)
    return path


def load_checkpoint(path: str) -> LayeredModel:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}")
    return model_from_dict(data)
