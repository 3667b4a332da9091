"""Parameter storage and the flat-array checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (name, shape and float
offset of every array, plus free-form metadata) and ``params.bin``, the
concatenation of all arrays as little-endian float64.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor

MANIFEST = "manifest.json"
BLOB = "params.bin"


class ParamStore:
    """Ordered mapping of parameter name to a gradient-carrying :class:`Tensor`."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite values in place; shapes must match."""
        for k, t in self._params.items():
            a = np.asarray(arrays[prefix + k], dtype=np.float64)
            if a.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {a.shape} != parameter shape {t.shape}")
            t.data = a.copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data)
        return out

    def copy_from(self, other: "ParamStore") -> None:
        self.load_arrays(other.to_arrays())


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (path / BLOB).write_bytes(blob.astype("<f8").tobytes())
    manifest = {"dtype": "<f8", "count": int(offset), "params": entries, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f8")
    if blob.size != manifest["count"]:
        raise DimensionError(f"{path}: blob holds {blob.size} floats, manifest says {manifest['count']}")
    arrays = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = blob[e["offset"]: e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})
