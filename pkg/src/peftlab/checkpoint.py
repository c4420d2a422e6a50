"""
Binary container for named float64 tensors.

Layout: the 8-byte magic ``PEFTLAB1``, a u64 little-endian header length, a
UTF-8 JSON header, then one record per tensor in lexicographic name order::

    u64 name length | name bytes | u64 rank | rank x u64 dims | f64 values (C order)

All integers and floats are little-endian, so files are byte-identical across
platforms and a save/load/save cycle reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError, CompatibilityError
from .tasks import Dataset, task_from_dict, task_to_dict
from .tensor import Tensor
from .transformer import EncoderConfig, EncoderParams

MAGIC = b"PEFTLAB1"
FORMAT = "peftlab-v1"
_U64 = struct.Struct("<Q")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    header = {**header, "format": FORMAT}
    head = _canonical_json(header)
    parts = [MAGIC, _U64.pack(len(head)), head]
    for name in sorted(tensors):
        value = np.asarray(tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        parts += [_U64.pack(len(encoded)), encoded, _U64.pack(value.ndim)]
        parts += [_U64.pack(d) for d in value.shape]
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def loads(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data, source)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{source}: not a peftlab checkpoint (bad magic)")
    try:
        header = json.loads(r.take(r.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{source}: unsupported format {header.get('format') if isinstance(header, dict) else header!r}")
    tensors: dict[str, np.ndarray] = {}
    last = None
    while r.pos < len(data):
        name = r.take(r.u64()).decode("utf-8")
        if last is not None and name <= last:
            raise CheckpointError(f"{source}: tensor names not unique and sorted at {name!r}")
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        last = name
    return header, tensors


def save(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    return loads(path.read_bytes(), str(path))


# -- typed wrappers -------------------------------------------------------------------------

def save_model(path, encoder: EncoderConfig, method: str, seed: int,
               tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    arrays = {k: (v.data if isinstance(v, Tensor) else v) for k, v in tensors.items()}
    save(path, {"kind": "model", "encoder": encoder.to_dict(), "method": method, "seed": seed}, arrays)


def load_upstream(path, expected: EncoderConfig | None = None) -> tuple[EncoderParams, dict]:
    """Encoder tensors from a checkpoint; other records (e.g. the pretraining head) are ignored."""
    header, tensors = load(path)
    try:
        cfg = EncoderConfig(**header["encoder"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: header has no valid encoder config ({exc})") from None
    if expected is not None and cfg != expected:
        raise CompatibilityError(
            f"checkpoint {path} was written for encoder {cfg.to_dict()} but the config asks for {expected.to_dict()}")
    try:
        params = EncoderParams(cfg, {k: Tensor(v.copy()) for k, v in tensors.items()})
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return params, header


def save_dataset(path, ds: Dataset) -> None:
    tensors = {"features": ds.features}
    if ds.task.kind == "ctc":
        tensors["labels.lengths"] = np.array([len(lab) for lab in ds.labels], dtype=np.float64)
        tensors["labels.values"] = np.array([s for lab in ds.labels for s in lab], dtype=np.float64)
    else:
        tensors["labels"] = np.asarray(ds.labels, dtype=np.float64)
    save(path, {"kind": "dataset", "task": task_to_dict(ds.task), "split": ds.split, "seed": ds.seed}, tensors)


def load_dataset(path) -> Dataset:
    header, tensors = load(path)
    if header.get("kind") != "dataset":
        raise CheckpointError(f"{path}: not a dataset container")
    task = task_from_dict(header["task"])
    if task.kind == "ctc":
        lengths = tensors["labels.lengths"].astype(np.int64)
        values = tensors["labels.values"].astype(np.int64)
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        labels = [tuple(int(s) for s in values[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    elif task.kind == "utterance":
        labels = [int(k) for k in tensors["labels"]]
    else:
        labels = list(tensors["labels"])
    return Dataset(task, tensors["features"], labels, header["split"], header["seed"])
