"""MILCKPT1 checkpoint files.

Layout::

    b"MILCKPT1"                      8 bytes
    header length n                  uint64, little-endian
    JSON header                      n bytes, UTF-8
    payload                          little-endian float32 tensors, header order

The header holds ``model`` (the ModelSpec dict), ``params`` (a list of
``[name, shape]`` pairs), ``step``, ``seed`` and free-form ``extra``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .heads import MilModel, ModelSpec

MAGIC = b"MILCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MilModel, step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    named = list(model.named_parameters())
    header = {
        "model": model.spec.to_dict(),
        "params": [[name, list(p.shape)] for name, p in named],
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a MILCKPT1 file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    payload = raw[16 + n:]
    expected = sum(4 * int(np.prod(shape)) for _, shape in header["params"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    state = {}
    off = 0
    for name, shape in header["params"]:
        size = 4 * int(np.prod(shape))
        state[name] = np.frombuffer(payload[off:off + size], dtype="<f4").reshape(shape).astype(np.float32)
        off += size
    return header, state


def load_checkpoint(path, dtype=np.float32) -> tuple[MilModel, dict]:
    header, state = read_checkpoint(path)
    model = MilModel(ModelSpec.from_dict(header["model"]), np.random.default_rng(0), dtype)
    model.load_state_dict(state)
    return model, header
