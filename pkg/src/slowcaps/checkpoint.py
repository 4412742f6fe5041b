"""Bit-exact JSON serialization of named float64 arrays.

A checkpoint is one JSON document mapping each array name to an object
with two keys: "shape" (list of ints) and "data" (flat row-major list of
float literals).  Python's repr-based float formatting round-trips IEEE
doubles exactly, so save followed by load reproduces every bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = [
    "dumps_arrays",
    "loads_arrays",
    "save_arrays",
    "load_arrays",
    "tensors_to_arrays",
    "arrays_to_tensors",
]


def dumps_arrays(arrays: dict[str, np.ndarray]) -> str:
    doc = {}
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in array {name}")
        doc[name] = {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def loads_arrays(text: str) -> dict[str, np.ndarray]:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("checkpoint document must be a JSON object")
    arrays: dict[str, np.ndarray] = {}
    for name, entry in doc.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            data = entry["data"]
        except (TypeError, KeyError) as exc:
            raise ValueError(f"malformed checkpoint entry for {name}") from exc
        n = 1
        for s in shape:
            if s < 0:
                raise ValueError(f"negative extent in shape of {name}")
            n *= s
        if len(data) != n:
            raise ValueError(
                f"array {name}: shape {shape} expects {n} values, got {len(data)}"
            )
        arrays[name] = np.asarray(data, dtype=np.float64).reshape(shape)
    return arrays


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_text(dumps_arrays(arrays), encoding="utf-8")


def load_arrays(path) -> dict[str, np.ndarray]:
    return loads_arrays(Path(path).read_text(encoding="utf-8"))


def tensors_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.items()}


def arrays_to_tensors(
    arrays: dict[str, np.ndarray], requires_grad: bool = True
) -> dict[str, Tensor]:
    return {name: Tensor(a, requires_grad=requires_grad)
            for name, a in arrays.items()}
