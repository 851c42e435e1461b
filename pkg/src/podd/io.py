"""Artifact files: posters, label tensors, orders, embeddings, logs.

Binary formats are fixed-layout and little-endian so artifacts are
portable across machines:

* poster file:  magic ``PODDv1\\0\\0``, u32 height, width, channels,
  then float32 pixels, row-major, channel-last;
* labels file:  magic ``PODLv1\\0\\0``, u32 rows, cols, n_classes,
  then float32 label-tensor entries in the same order.

All writers go through a write-temp-then-rename step so a crash never
leaves a half-written artifact behind.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from typing import Any

import numpy as np
import torch
from PIL import Image

from .geometry import Poster
from .ordering import ClassOrder, EmbeddingSet

__all__ = [
    "POSTER_MAGIC",
    "LABELS_MAGIC",
    "write_poster",
    "read_poster",
    "write_label_tensor",
    "read_label_tensor",
    "export_png",
    "write_json",
    "read_json",
    "write_class_order",
    "read_class_order",
    "read_embeddings",
    "embedding_set_for",
    "config_hash",
    "CsvLogger",
    "save_checkpoint",
    "load_checkpoint",
]

POSTER_MAGIC = b"PODDv1\x00\x00"
LABELS_MAGIC = b"PODLv1\x00\x00"
_HEADER = struct.Struct("<8sIII")


def _atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _write_tensor_file(path, magic: bytes, dims: tuple[int, int, int], data: np.ndarray) -> None:
    header = _HEADER.pack(magic, *dims)
    _atomic_write_bytes(path, header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_tensor_file(path, magic: bytes, kind: str) -> tuple[tuple[int, int, int], np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: too short for a {kind} header ({len(raw)} bytes)")
    got_magic, a, b, c = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise ValueError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    expected = _HEADER.size + a * b * c * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: {kind} payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(a, b, c)
    return (a, b, c), data


def write_poster(poster: Poster, path: str | os.PathLike) -> None:
    pixels = poster.pixels.detach().numpy()
    _write_tensor_file(path, POSTER_MAGIC, pixels.shape, pixels)


def read_poster(path: str | os.PathLike) -> Poster:
    _, data = _read_tensor_file(path, POSTER_MAGIC, "poster")
    return Poster(pixels=torch.from_numpy(data.astype(np.float32)))


def write_label_tensor(label_tensor: torch.Tensor, path: str | os.PathLike) -> None:
    if label_tensor.ndim != 3:
        raise ValueError(f"label tensor must be 3-D, got shape {tuple(label_tensor.shape)}")
    data = label_tensor.detach().numpy()
    _write_tensor_file(path, LABELS_MAGIC, data.shape, data)


def read_label_tensor(path: str | os.PathLike) -> torch.Tensor:
    _, data = _read_tensor_file(path, LABELS_MAGIC, "labels")
    return torch.from_numpy(data.astype(np.float32))


def export_png(poster: Poster, path: str | os.PathLike) -> None:
    """Render the poster to PNG, each channel affinely mapped to [0, 255].

    Poster pixels are unconstrained reals; the affine map uses the
    per-channel min and max, with constant channels rendered black.
    """
    pixels = poster.pixels.detach().numpy().astype(np.float64)
    lo = pixels.min(axis=(0, 1), keepdims=True)
    hi = pixels.max(axis=(0, 1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = np.clip((pixels - lo) / span * 255.0, 0.0, 255.0)
    arr = np.rint(scaled).astype(np.uint8)
    if poster.channels == 1:
        image = Image.fromarray(arr[:, :, 0], mode="L")
    elif poster.channels == 3:
        image = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError(f"PNG export supports 1 or 3 channels, got {poster.channels}")
    tmp = f"{os.fspath(path)}.tmp"
    image.save(tmp, format="PNG")
    os.replace(tmp, path)


def write_json(payload: dict[str, Any], path: str | os.PathLike) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    _atomic_write_bytes(path, (text + "\n").encode())


def read_json(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_class_order(order: ClassOrder, score: float, path: str | os.PathLike, extras: dict[str, Any] | None = None) -> None:
    payload: dict[str, Any] = {
        "rows": order.rows,
        "cols": order.cols,
        "grid": order.grid.tolist(),
        "score": score,
    }
    if extras:
        payload.update(extras)
    write_json(payload, path)


def read_class_order(path: str | os.PathLike) -> ClassOrder:
    payload = read_json(path)
    for key in ("rows", "cols", "grid"):
        if key not in payload:
            raise ValueError(f"{path}: missing key {key!r}")
    grid = np.asarray(payload["grid"], dtype=np.int64)
    if grid.shape != (payload["rows"], payload["cols"]):
        raise ValueError(
            f"{path}: grid shape {grid.shape} contradicts rows/cols "
            f"({payload['rows']}, {payload['cols']})"
        )
    return ClassOrder(grid=grid)


def read_embeddings(path: str | os.PathLike) -> tuple[int, dict[str, np.ndarray]]:
    """Embedding file: {"dim": d, "embeddings": {name: [floats...]}}."""
    payload = read_json(path)
    try:
        dim = int(payload["dim"])
        table = payload["embeddings"]
    except KeyError as e:
        raise ValueError(f"{path}: missing key {e}") from None
    vectors: dict[str, np.ndarray] = {}
    for name, values in table.items():
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (dim,):
            raise ValueError(f"{path}: embedding {name!r} has shape {vec.shape}, expected ({dim},)")
        vectors[name] = vec
    return dim, vectors


def embedding_set_for(class_names: tuple[str, ...], table: dict[str, np.ndarray]) -> EmbeddingSet:
    """Arrange a name->vector table in dataset class order; missing names are fatal."""
    missing = [name for name in class_names if name not in table]
    if missing:
        raise ValueError(f"embeddings missing for classes: {', '.join(missing)}")
    vectors = np.stack([table[name] for name in class_names])
    return EmbeddingSet(names=class_names, vectors=vectors)


def config_hash(config: dict[str, Any]) -> str:
    """Stable short hash of a JSON-serializable config."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


class CsvLogger:
    """Append-only CSV log; writes the header once on creation."""

    def __init__(self, path: str | os.PathLike, columns: tuple[str, ...]):
        self.path = os.fspath(path)
        self.columns = columns
        if not os.path.exists(self.path):
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(columns)

    def append(self, record: dict[str, Any]) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([record[c] for c in self.columns])


def save_checkpoint(path: str | os.PathLike, payload: dict[str, Any]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    # Checkpoints carry numpy RNG state, which needs full unpickling.
    return torch.load(path, weights_only=False)
