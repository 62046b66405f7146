"""Checkpoint files: a magic line, one JSON header line, then raw <f8 parameters.

The header records the encoder config, seed, epoch count, loss trace and the
name and shape of every parameter in declaration order. Loading checks the
byte count exactly, so truncated or padded files are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..model import CdeModel, EncoderConfig, init_model

MAGIC = b"CDELAB-CHECKPOINT v1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    model: CdeModel, path: str | Path, seed: int = 0, epoch: int = 0, loss_trace: list[float] | None = None
) -> Path:
    header = {
        "encoder": model.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "loss_trace": [float(v) for v in (loss_trace or [])],
        "params": [[name, list(arr.shape)] for name, arr in model.params.items()],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path, variant: str | None = None) -> tuple[CdeModel, dict]:
    """Returns (model, header). ``variant`` ('global' or 'patch') rejects the other kind."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic line)")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) : end])
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from err
    try:
        config = EncoderConfig.from_dict(header["encoder"])
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: invalid encoder config ({err})") from err
    if variant is not None:
        kind = "patch" if config.patch else "global"
        if variant != kind:
            raise CheckpointError(f"{path}: checkpoint holds a {kind} model, expected {variant}")
    reference = init_model(config, 0).params
    listed = [(name, tuple(shape)) for name, shape in header["params"]]
    expected = [(name, arr.shape) for name, arr in reference.items()]
    if listed != expected:
        for (n1, s1), (n2, s2) in zip(listed, expected):
            if n1 != n2 or s1 != s2:
                raise CheckpointError(f"{path}: parameter '{n1}' {s1} does not match config ('{n2}' {s2})")
        raise CheckpointError(f"{path}: parameter count {len(listed)} != {len(expected)}")
    body = raw[end + 1 :]
    need = sum(int(np.prod(shape)) for _, shape in expected) * 8
    if len(body) != need:
        raise CheckpointError(f"{path}: parameter block has {len(body)} bytes, expected {need} (truncated?)")
    params, offset = {}, 0
    for name, shape in expected:
        n = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(body[offset : offset + n], dtype="<f8").reshape(shape).astype(np.float64)
        offset += n
    return CdeModel(config, params), header
