"""Binary formats: spectrogram shard records and model checkpoints.

Shard record (little-endian)::

    b"ASCF" | u32 version=1 | u32 n_mels | u32 n_frames
    | f32[n_mels * n_frames] row-major | u32 n_labels | u32[n_labels]

Checkpoint::

    b"ASCA" | u32 version=1 | u32 len | utf-8 JSON {"arch": ..., "meta": ...}
    | u32 n_records | records

with each record ``u32 len | utf-8 path | u32 ndim | u32[ndim] | f32[...]``.
Batch-norm running statistics are stored as ``<norm>.running_mean`` and
``<norm>.running_var`` records.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .model import ArchSpec, ModelWeights
from .tensor import BatchNormState, Tensor

SHARD_MAGIC = b"ASCF"
CKPT_MAGIC = b"ASCA"
VERSION = 1
_STATS = (".running_mean", ".running_var")


class FormatError(ValueError):
    pass


def _read(fp: BinaryIO, n: int, what: str) -> bytes:
    b = fp.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file while reading {what}")
    return b


def _u32(fp: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read(fp, 4, what))[0]


# ---------------------------------------------------------------------------
# shards


def encode_record(values: np.ndarray, labels) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"shard record needs a 2-D grid, got shape {values.shape}")
    labels = [int(i) for i in labels]
    n_mels, n_frames = values.shape
    return b"".join([
        SHARD_MAGIC,
        struct.pack("<III", VERSION, n_mels, n_frames),
        np.ascontiguousarray(values, dtype="<f4").tobytes(),
        struct.pack("<I", len(labels)),
        np.asarray(labels, dtype="<u4").tobytes(),
    ])


def iter_records(fp: BinaryIO) -> Iterator[tuple[np.ndarray, list[int]]]:
    while True:
        magic = fp.read(4)
        if not magic:
            return
        if magic != SHARD_MAGIC:
            raise FormatError(f"bad shard magic {magic!r}")
        version, n_mels, n_frames = struct.unpack("<III", _read(fp, 12, "record header"))
        if version != VERSION:
            raise FormatError(f"unsupported shard version {version}")
        values = np.frombuffer(_read(fp, 4 * n_mels * n_frames, "record values"), dtype="<f4")
        n_labels = _u32(fp, "label count")
        labels = np.frombuffer(_read(fp, 4 * n_labels, "labels"), dtype="<u4")
        yield values.reshape(n_mels, n_frames).astype(np.float32), [int(i) for i in labels]


def write_shard(path, records) -> None:
    with open(path, "wb") as fp:
        for values, labels in records:
            fp.write(encode_record(values, labels))


def read_shard(path) -> list[tuple[np.ndarray, list[int]]]:
    with open(path, "rb") as fp:
        return list(iter_records(fp))


# ---------------------------------------------------------------------------
# checkpoints


def _record(path: str, arr: np.ndarray) -> bytes:
    name = path.encode()
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return b"".join([
        struct.pack("<I", len(name)), name,
        struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
        arr.tobytes(),
    ])


def checkpoint_bytes(spec: ArchSpec, weights: ModelWeights, meta: dict | None = None) -> bytes:
    header = json.dumps({"arch": spec.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    records = [_record(k, t.data) for k, t in weights.params.items()]
    for k, st in weights.bn.items():
        records.append(_record(k + ".running_mean", st.running_mean))
        records.append(_record(k + ".running_var", st.running_var))
    return b"".join([CKPT_MAGIC, struct.pack("<II", VERSION, len(header)), header,
                     struct.pack("<I", len(records)), *records])


def save_checkpoint(path, spec: ArchSpec, weights: ModelWeights, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, weights, meta))


def load_checkpoint(path) -> tuple[ArchSpec, ModelWeights, dict]:
    fp = io.BytesIO(Path(path).read_bytes())
    if _read(fp, 4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: not an ASCA checkpoint")
    version = _u32(fp, "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(_read(fp, _u32(fp, "header length"), "header").decode())
    spec = ArchSpec.from_dict(header["arch"])
    weights = ModelWeights()
    stats: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(_u32(fp, "record count")):
        name = _read(fp, _u32(fp, "path length"), "path").decode()
        ndim = _u32(fp, "ndim")
        shape = struct.unpack(f"<{ndim}I", _read(fp, 4 * ndim, "shape"))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(_read(fp, 4 * n, name), dtype="<f4").reshape(shape).astype(np.float32)
        suffix = next((s for s in _STATS if name.endswith(s)), None)
        if suffix:
            stats.setdefault(name[: -len(suffix)], {})[suffix] = arr
        else:
            weights.params[name] = Tensor(arr, requires_grad=True, name=name)
    for key, d in stats.items():
        weights.bn[key] = BatchNormState(d[".running_mean"].copy(), d[".running_var"].copy())
    return spec, weights, header.get("meta", {})
