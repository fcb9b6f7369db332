"""The "SSRW" weight container.

Layout: magic ``SSRW``, u32 version, u64 header length, UTF-8 JSON header,
then raw little-endian tensor payloads in index order.  The header holds the
model config, a tensor index ``name -> {dtype, shape, offset}`` (offsets
relative to the payload start) and any extra metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, check_weights, init_weights

MAGIC = b"SSRW"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    index = {}
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        index[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": index}, sort_keys=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        f.write(head)
        for raw in chunks:
            f.write(raw)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: expected magic {MAGIC.decode()!r}, found {blob[:4]!r}")
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint header")
    _, version, head_len = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + head_len
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    payload = memoryview(blob)[start:]
    tensors = {}
    for name, meta in header.pop("tensors").items():
        dtype = np.dtype(_DTYPES[meta["dtype"]])
        count = int(np.prod(meta["shape"]))
        end = meta["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"truncated checkpoint: tensor {name!r} runs past the end of the file")
        arr = np.frombuffer(payload[meta["offset"]:end], dtype=dtype).reshape(meta["shape"])
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return header, tensors


def save_model(path, config: ModelConfig, weights: ModelWeights, extra: dict | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    check_weights(config, weights)
    tensors = {name: t.data for name, t in weights.named().items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    write_container(path, {"config": config.to_dict(), **(extra or {})}, tensors)


def load_model(path) -> tuple[ModelConfig, ModelWeights, dict, dict[str, np.ndarray]]:
    """Returns (config, weights, remaining header, tensors not belonging to the model)."""
    header, tensors = read_container(path)
    config = ModelConfig.from_dict(header.pop("config"))
    weights = init_weights(config, seed=0)
    for name, p in weights.named().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config expects {p.shape}")
        p.data = np.ascontiguousarray(arr)
    check_weights(config, weights)
    return config, weights, header, tensors
