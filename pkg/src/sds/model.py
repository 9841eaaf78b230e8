"""Layer-stack model, forward pass, and the SDST tensor container.

SDST layout (little-endian)::

    b"SDST" | u32 version=1 | u32 entry_count
    per entry: u32 name_len | utf-8 name | u32 ndim | u64 dims[ndim] | u8 dtype | payload

``dtype`` 1 is float32; the payload is the row-major raw bytes. A model is an
SDST file plus a JSON manifest naming the weight/bias tensors of each layer.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DimensionError,
    DuplicateNameError,
    InvalidEntryError,
    TruncatedError,
    VersionMismatchError,
)
from .linalg import F32, F64, as_matrix, check_finite

MAGIC = b"SDST"
VERSION = 1
DTYPE_F32 = 1


class Activation(str, Enum):
    NONE = "none"
    RELU = "relu"

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(y, 0)
        return y


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray | None = None
    activation: Activation = Activation.NONE

    def __post_init__(self):
        object.__setattr__(self, "weight", as_matrix(self.weight, "weight"))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=F32).reshape(-1)
            if b.shape[0] != self.out_dim:
                raise DimensionError(f"bias length {b.shape[0]} does not match out_dim {self.out_dim}")
            object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def with_weight(self, weight: np.ndarray) -> "LinearLayer":
        return replace(self, weight=weight)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.weight.astype(F64) @ np.asarray(x, dtype=F64)
        if self.bias is not None:
            y += self.bias.astype(F64)[:, None]
        return self.activation.apply(y).astype(F32)


@dataclass(frozen=True)
class LayerStack:
    layers: tuple[LinearLayer, ...]
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise DimensionError(
                    f"layer {i} out_dim {self.layers[i].out_dim} != layer {i + 1} in_dim "
                    f"{self.layers[i + 1].in_dim}",
                    layer=i + 1,
                )

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> LinearLayer:
        return self.layers[i]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def with_weights(self, weights) -> "LayerStack":
        layers = [layer.with_weight(w) for layer, w in zip(self.layers, weights, strict=True)]
        return LayerStack(tuple(layers), self.name)

    def same_shape(self, other: "LayerStack") -> bool:
        return len(self) == len(other) and all(
            a.weight.shape == b.weight.shape for a, b in zip(self.layers, other.layers)
        )


def forward_all(model: LayerStack, x) -> list[np.ndarray]:
    """Activations ``[x, h1, ..., hL]``; index ``l`` is the input of layer ``l``."""
    x = as_matrix(x, "input")
    acts = [x]
    for i, layer in enumerate(model.layers):
        if acts[-1].shape[0] != layer.in_dim:
            raise DimensionError(
                f"input has {acts[-1].shape[0]} rows but layer {i} expects in_dim {layer.in_dim}",
                layer=i,
            )
        acts.append(check_finite(layer(acts[-1]), f"layer {i} output"))
    return acts


def forward(model: LayerStack, x) -> np.ndarray:
    return forward_all(model, x)[-1]


# ---------------------------------------------------------------- container IO


def _atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(entries: dict[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> bytes:
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    seen = set()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, tensor in items:
        if not isinstance(name, str) or not name:
            raise InvalidEntryError("tensor names must be non-empty strings")
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(tensor)
        if arr.dtype != F32:
            raise InvalidEntryError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is supported")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", DTYPE_F32))
        chunks.append(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"truncated container while reading {what} at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError("not an SDST container (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionMismatchError(f"unsupported SDST version {version} (expected {VERSION})")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidEntryError("tensor name is not valid utf-8") from exc
        if not name:
            raise InvalidEntryError("empty tensor name")
        if name in entries:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        (dtype,) = struct.unpack("<B", take(1, "dtype"))
        if dtype != DTYPE_F32:
            raise InvalidEntryError(f"tensor {name!r} has unknown dtype code {dtype}")
        numel = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * numel, f"payload of {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").astype(F32).reshape(dims)
    if pos != len(view):
        raise InvalidEntryError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def write_container(path, entries) -> None:
    _atomic_write_bytes(path, encode_container(entries))


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


# ---------------------------------------------------------------- model files


def model_to_entries(model: LayerStack) -> tuple[dict, dict[str, np.ndarray]]:
    manifest = {"name": model.name, "layers": []}
    entries: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        wname = f"layers.{i}.weight"
        entries[wname] = layer.weight
        bname = None
        if layer.bias is not None:
            bname = f"layers.{i}.bias"
            entries[bname] = layer.bias
        manifest["layers"].append({"weight": wname, "bias": bname, "activation": layer.activation.value})
    return manifest, entries


def model_from_entries(manifest: dict, entries: dict[str, np.ndarray]) -> LayerStack:
    try:
        specs = manifest["layers"]
        name = manifest.get("name", "model")
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError("manifest must be an object with a 'layers' list") from exc
    if not specs:
        raise DataError("manifest lists no layers")
    layers = []
    for i, spec in enumerate(specs):
        try:
            w = entries[spec["weight"]]
            b = entries[spec["bias"]] if spec.get("bias") else None
            act = Activation(spec.get("activation", "none"))
        except KeyError as exc:
            raise DataError(f"manifest layer {i} references missing tensor {exc}", layer=i) from exc
        except ValueError as exc:
            raise DataError(f"manifest layer {i}: {exc}", layer=i) from exc
        if w.ndim != 2:
            raise DimensionError(f"weight of layer {i} is not 2-D", layer=i)
        layers.append(LinearLayer(w, b, act))
    return LayerStack(tuple(layers), name)


def save_model(model: LayerStack, path, manifest_path=None) -> dict:
    manifest, entries = model_to_entries(model)
    write_container(path, entries)
    if manifest_path is not None:
        atomic_write_text(manifest_path, json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_manifest(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc


def load_model(path, manifest_path) -> LayerStack:
    return model_from_entries(load_manifest(manifest_path), read_container(path))


def save_weights(model: LayerStack, path, manifest: dict) -> None:
    """Write ``model`` using the tensor names of an existing manifest."""
    entries = {}
    for layer, spec in zip(model.layers, manifest["layers"], strict=True):
        entries[spec["weight"]] = layer.weight
        if spec.get("bias"):
            entries[spec["bias"]] = layer.bias
    write_container(path, entries)


def random_model(rng, dims, activation: Activation | str = Activation.RELU, std: float | None = None,
                 bias: bool = False, name: str = "teacher") -> LayerStack:
    """Gaussian teacher: weights ~ N(0, std^2), std defaulting to 1/sqrt(in_dim).

    Every layer except the last uses ``activation``.
    """
    from .linalg import Rng, gaussian

    if not isinstance(rng, Rng):
        rng = Rng(rng)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        s = std if std is not None else 1.0 / np.sqrt(d_in)
        w = gaussian(rng, d_out, d_in, 0.0, s)
        b = gaussian(rng, 1, d_out, 0.0, s).reshape(-1) if bias else None
        act = Activation(activation) if i < len(dims) - 2 else Activation.NONE
        layers.append(LinearLayer(w, b, act))
    return LayerStack(tuple(layers), name)
