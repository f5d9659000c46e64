"""Interchange bundle and dataset files.

A model bundle is a directory holding ``model.json`` plus one raw blob per
weight tensor. Blobs are little-endian 32-bit floats, row-major; conv
kernels are laid out ``[out_channels, in_channels, kernel_h, kernel_w]``.
Weights are upcast to float64 in memory on load and truncated back to
float32 on save, so ``save_model(load_model(p))`` reproduces ``p``
byte for byte when ``p`` was produced by :func:`save_model`.

A dataset is a directory with ``data.json`` plus an ``inputs`` blob
(little-endian float32, shape ``[N, C, H, W]``) and a ``labels`` blob
(little-endian int64, shape ``[N]``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GraphValidationError
from .model import DEFAULT_BN_EPS, LAYER_KINDS, LayerDesc, NetworkGraph

MODEL_MANIFEST = "model.json"
DATA_MANIFEST = "data.json"
FORMAT_VERSION = 1

# descriptor keys serialized per kind, in canonical order
_DESC_KEYS = {
    "input": ("channels", "height", "width"),
    "conv2d": ("kernel_h", "kernel_w", "stride", "padding",
               "in_channels", "out_channels", "prunable"),
    "dense": ("in_channels", "out_channels", "prunable"),
    "batchnorm": ("epsilon",),
    "relu": (),
    "global_avg_pool": (),
    "add": (),
    "softmax_ce": (),
}


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"missing manifest {path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed JSON in {path}: {e}")


def _layer_to_json(desc: LayerDesc) -> dict:
    out = {"id": desc.id, "kind": desc.kind, "predecessors": list(desc.predecessors)}
    for key in _DESC_KEYS[desc.kind]:
        out[key] = getattr(desc, key)
    return out


def _layer_from_json(obj) -> LayerDesc:
    if not isinstance(obj, dict) or "id" not in obj or "kind" not in obj:
        raise FormatError(f"layer entry must be an object with id/kind: {obj!r}")
    lid, kind = obj["id"], obj["kind"]
    if kind not in LAYER_KINDS:
        raise GraphValidationError(f"unknown layer kind '{kind}'", lid)
    fields = {"id": lid, "kind": kind,
              "predecessors": tuple(obj.get("predecessors", []))}
    for key in _DESC_KEYS[kind]:
        if key not in obj:
            if key == "epsilon":
                fields[key] = DEFAULT_BN_EPS
                continue
            raise GraphValidationError(f"missing descriptor field '{key}'", lid)
        fields[key] = obj[key]
    return LayerDesc(**fields)


def save_model(graph: NetworkGraph, path) -> Path:
    """Write a graph as an interchange bundle; returns the bundle directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for lid in (d.id for d in graph.layers):
        for name, arr in graph.weights.get(lid, {}).items():
            blob = f"{lid}.{name}.bin"
            tensors.append({
                "name": f"{lid}.{name}",
                "layer": lid,
                "tensor": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "file": blob,
            })
            (path / blob).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "layers": [_layer_to_json(d) for d in graph.layers],
        "tensors": tensors,
    }
    _dump_json(manifest, path / MODEL_MANIFEST)
    return path


def _read_blob(path: Path, shape, dtype):
    if not path.exists():
        raise FormatError(f"missing blob {path}")
    raw = path.read_bytes()
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    item = np.dtype(dtype).itemsize
    if len(raw) != count * item:
        raise FormatError(
            f"blob {path.name} holds {len(raw)} bytes, expected {count * item} "
            f"for shape {list(shape)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load_model(path) -> NetworkGraph:
    """Load and validate an interchange bundle."""
    path = Path(path)
    manifest = _read_json(path / MODEL_MANIFEST)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    if "layers" not in manifest or "tensors" not in manifest:
        raise FormatError("manifest needs 'layers' and 'tensors' entries")
    layers = [_layer_from_json(o) for o in manifest["layers"]]
    weights = {}
    for entry in manifest["tensors"]:
        try:
            lid, name, shape, blob = (entry["layer"], entry["tensor"],
                                      entry["shape"], entry["file"])
        except (KeyError, TypeError):
            raise FormatError(f"malformed tensor entry: {entry!r}")
        if entry.get("dtype") != "f32":
            raise FormatError(f"unsupported tensor dtype {entry.get('dtype')!r}")
        try:
            arr = _read_blob(path / blob, shape, "<f4")
        except FormatError as e:
            raise FormatError(f"layer '{lid}': {e}")
        weights.setdefault(lid, {})[name] = arr.astype(np.float64)
    return NetworkGraph(layers, weights)


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """One batch of inputs [N, C, H, W] and integer labels [N]."""
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise FormatError(f"inputs must be [N, C, H, W], got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise FormatError("labels must be one integer per input")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset with the same layout as a Batch."""
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def batch(self, indices) -> Batch:
        return Batch(self.inputs[indices], self.labels[indices])

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


def sample_batch(dataset: Dataset, size: int, rng: np.random.Generator) -> Batch:
    """Draw a fixed batch without replacement (the whole set if smaller)."""
    size = min(size, dataset.n)
    idx = rng.choice(dataset.n, size=size, replace=False)
    idx.sort()
    return dataset.batch(idx)


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "inputs.bin").write_bytes(
        np.ascontiguousarray(dataset.inputs, dtype="<f4").tobytes())
    (path / "labels.bin").write_bytes(
        np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "inputs": {"shape": list(dataset.inputs.shape), "dtype": "f32",
                   "file": "inputs.bin"},
        "labels": {"shape": [int(dataset.labels.shape[0])], "dtype": "i64",
                   "file": "labels.bin"},
    }
    _dump_json(manifest, path / DATA_MANIFEST)
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = _read_json(path / DATA_MANIFEST)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        ispec, lspec = manifest["inputs"], manifest["labels"]
        inputs = _read_blob(path / ispec["file"], ispec["shape"], "<f4").astype(np.float64)
        labels = _read_blob(path / lspec["file"], lspec["shape"], "<i8").astype(np.int64)
    except (KeyError, TypeError):
        raise FormatError("data manifest needs 'inputs' and 'labels' blob specs")
    if inputs.ndim != 4:
        raise FormatError(f"inputs must be [N, C, H, W], got shape {list(inputs.shape)}")
    if labels.shape != (inputs.shape[0],):
        raise FormatError("label count does not match input count")
    if not np.all(np.isfinite(inputs)):
        raise FormatError("inputs contain non-finite values")
    if labels.min(initial=0) < 0:
        raise FormatError("labels must be non-negative")
    return Dataset(inputs=inputs, labels=labels)
