"""Checkpoint file: magic line, text manifest, then a float32 little-endian block.

Layout::

    MSGR1
    stage <tag>
    config <json>
    params <count>
    <name> <d0,d1,...> <byte offset>     (one line per parameter)
    end
    <raw values>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import StitchNet

MAGIC = b"MSGR1"
VALUE_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: StitchNet, stage: str = "none", extra: dict | None = None) -> None:
    params = list(model.named_parameters())
    lines = [MAGIC.decode(), f"stage {stage}",
             "config " + json.dumps({"model": model.cfg.to_dict(), **(extra or {})}, sort_keys=True),
             f"params {len(params)}"]
    offset = 0
    blocks = []
    for name, p in params:
        arr = np.ascontiguousarray(p.data, dtype=VALUE_DTYPE)
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {offset}")
        blocks.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for b in blocks:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(header, {name: float32 array})``; header has ``stage`` and ``config``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: manifest is not terminated")
    head = raw[:end].decode().split("\n")
    body = raw[end + len(b"\nend\n"):]
    header = {"stage": head[1].split(" ", 1)[1], "config": json.loads(head[2].split(" ", 1)[1])}
    n = int(head[3].split()[1])
    arrays = {}
    for line in head[4:4 + n]:
        name, shape, off = line.rsplit(" ", 2)
        dims = tuple(int(s) for s in shape.split(",") if s)
        count = int(np.prod(dims)) if dims else 1
        off = int(off)
        if off + count * VALUE_DTYPE.itemsize > len(body):
            raise CheckpointError(f"{path}: value block truncated at {name}")
        arrays[name] = np.frombuffer(body, VALUE_DTYPE, count, off).reshape(dims).copy()
    return header, arrays


def load_into(model: StitchNet, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].astype(p.data.dtype)


def load_checkpoint(path, dtype=np.float32) -> tuple[StitchNet, dict]:
    header, arrays = read_checkpoint(path)
    model = StitchNet(ModelConfig.from_dict(header["config"]["model"]), dtype=dtype)
    load_into(model, arrays)
    return model, header
