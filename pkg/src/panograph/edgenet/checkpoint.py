"""Versioned binary checkpoint container.

Layout::

    b"EDGENET\\0"          8-byte magic
    uint32 LE              format version
    uint32 LE              header length H
    H bytes                UTF-8 JSON header: hyperparameters, counters, tensor table
    float32 LE blobs       parameters, then momentum buffers, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from panograph.edgenet.model import PARAM_SHAPES
from panograph.edgenet.optim import TrainState
from panograph.errors import FormatError, ShapeError

MAGIC = b"EDGENET\0"
VERSION = 1
F32 = np.dtype("<f4")


def encode_checkpoint(state: TrainState, meta: dict | None = None) -> bytes:
    tensors = [(f"param/{k}", state.params[k]) for k in PARAM_SHAPES]
    tensors += [(f"momentum/{k}", state.momentum[k]) for k in PARAM_SHAPES]
    header = {
        "hyper": {"lr": state.lr, "momentum": state.momentum_coef, "weight_decay": state.weight_decay},
        "step": state.step,
        "epoch": state.epoch,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(t, dtype=F32).tobytes() for _, t in tensors)
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + body


def decode_checkpoint(blob: bytes) -> tuple[TrainState, dict]:
    if blob[:8] != MAGIC:
        raise FormatError("not an EdgeNet checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError("checkpoint truncated")
        arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype=F32).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(blob):
        raise FormatError("trailing bytes after checkpoint tensors")
    params, momentum = {}, {}
    for k, shape in PARAM_SHAPES.items():
        for prefix, target in (("param/", params), ("momentum/", momentum)):
            name = prefix + k
            if name not in arrays:
                raise ShapeError(f"checkpoint lacks tensor {name}")
            if arrays[name].shape != shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != expected {shape}")
            target[k] = arrays[name]
    extra = set(arrays) - {f"{p}{k}" for p in ("param/", "momentum/") for k in PARAM_SHAPES}
    if extra:
        raise ShapeError(f"unexpected tensors in checkpoint: {sorted(extra)}")
    hyper = header["hyper"]
    state = TrainState(
        params=params,
        momentum=momentum,
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        lr=float(hyper["lr"]),
        momentum_coef=float(hyper["momentum"]),
        weight_decay=float(hyper["weight_decay"]),
    )
    return state, header.get("meta", {})


def save_checkpoint(path: str | Path, state: TrainState, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, meta))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[TrainState, dict]:
    return decode_checkpoint(Path(path).read_bytes())
