"""Binary checkpoint: magic, JSON header, then raw little-endian float32 buffers.

Layout::

    b"SFCK" | uint32 LE header length | UTF-8 JSON header | params | adam m | adam v

Buffers follow the order of ``header["params"]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SFCK"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    adam_t: int = 0
    rng_state: dict | None = None
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ck: Checkpoint) -> None:
    names = list(ck.params)
    header = {
        "version": VERSION,
        "config": ck.config,
        "step": ck.step,
        "epoch": ck.epoch,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "history": ck.history,
        "extra": ck.extra,
        "params": [[n, list(ck.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for group in (ck.params, ck.m, ck.v):
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype=_LE_F32).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    offset = 8 + n
    groups = []
    for _ in range(3):
        g = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated payload")
            g[name] = np.frombuffer(raw, dtype=_LE_F32, count=count, offset=offset).reshape(shape).astype(np.float32)
            offset = end
        groups.append(g)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(
        config=header["config"], params=groups[0], m=groups[1], v=groups[2],
        step=header["step"], epoch=header["epoch"], adam_t=header["adam_t"],
        rng_state=header["rng_state"], history=header["history"], extra=header["extra"],
    )
