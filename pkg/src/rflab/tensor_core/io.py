"""Binary tensor container and checkpoint files.

Layout (little-endian throughout)::

    b"RFCK" | u32 version=1 | u32 count
    per tensor: u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 data

JSON side-records (estimator config, provenance) ride along as rank-1
tensors whose float values are the record's UTF-8 bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from rflab.errors import FormatError
from rflab.tensor_core.layers import LayerParams
from rflab.tensor_core.optim import AdamState

MAGIC = b"RFCK"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_json(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_json(arr: np.ndarray):
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def write_tensors(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    stream.write(_U32.pack(VERSION))
    stream.write(_U32.pack(len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        stream.write(_U32.pack(len(raw)))
        stream.write(raw)
        stream.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            stream.write(_U32.pack(d))
        stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _take(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated container while reading {what}: wanted {n} bytes, got {len(buf)} ({buf[:16]!r})")
    return buf


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    magic = _take(stream, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad tensor container magic: {magic!r} (expected {MAGIC!r})")
    (version,) = _U32.unpack(_take(stream, 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor container version {version} (bytes {_U32.pack(version)!r})")
    (count,) = _U32.unpack(_take(stream, 4, "count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = _U32.unpack(_take(stream, 4, f"name length of tensor {i}"))
        name = _take(stream, nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = _U32.unpack(_take(stream, 4, f"rank of '{name}'"))
        dims = tuple(_U32.unpack(_take(stream, 4, f"dims of '{name}'"))[0] for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64))
        data = _take(stream, 4 * n, f"data of '{name}'")
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        tensors = read_tensors(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after tensor container in {path}")
    return tensors


@dataclass
class Checkpoint:
    params: LayerParams
    config: dict
    meta: dict = field(default_factory=dict)
    adam: AdamState | None = None


def save_checkpoint(path, params: LayerParams, config: dict, meta: dict | None = None,
                    adam: AdamState | None = None) -> None:
    tensors: dict[str, np.ndarray] = dict(params.arrays())
    if adam is not None:
        for name in params:
            tensors[name + ".m"] = adam.m[name]
            tensors[name + ".v"] = adam.v[name]
        tensors["adam.step"] = np.array([adam.step], dtype=np.float32)
    tensors["config"] = encode_json(config)
    tensors["meta"] = encode_json(meta or {})
    save_tensors(path, tensors)


def load_checkpoint(path) -> Checkpoint:
    tensors = load_tensors(path)
    if "config" not in tensors:
        raise FormatError(f"{path}: checkpoint has no 'config' record")
    config = decode_json(tensors.pop("config"))
    meta = decode_json(tensors.pop("meta")) if "meta" in tensors else {}
    step = tensors.pop("adam.step", None)
    names = [k for k in tensors if not (k.endswith(".m") or k.endswith(".v"))
             or (k[:-2] not in tensors)]
    params = LayerParams.from_arrays({k: tensors[k] for k in names})
    adam = None
    if step is not None:
        adam = AdamState(step=int(step[0]),
                         m={k: tensors[k + ".m"] for k in names},
                         v={k: tensors[k + ".v"] for k in names})
    return Checkpoint(params=params, config=config, meta=meta, adam=adam)
