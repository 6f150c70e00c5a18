"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic  b"FFUSECKP"            8 bytes
    version                       uint32
    blocks*                       until kind b"E"

    block: kind (1 byte) | name_len uint32 | name utf-8 | ndim uint32 | dims uint64 * ndim
           | payload_len uint64 | payload

Kinds: ``C`` config (canonical key=value text), ``M`` metadata JSON, ``P`` parameter,
``O`` optimizer state tensor, ``R`` RNG state bytes. Tensor payloads are raw
little-endian float32; text and byte payloads use ndim=1 with the byte length.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import CheckpointError, IncompatibleConfig

MAGIC = b"FFUSECKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)  # "<param>/<state key>"
    rng: dict[str, bytes] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # epoch, best_val_loss, stats, vocab, labels, templates...

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def best_val_loss(self) -> float:
        return float(self.meta.get("best_val_loss", float("nan")))


def _write_block(fh, kind: bytes, name: str, shape: tuple, payload: bytes) -> None:
    encoded = name.encode()
    fh.write(kind)
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", len(shape)))
    for dim in shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def serialize(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    text = ckpt.config.to_text().encode()
    _write_block(fh, b"C", "config", (len(text),), text)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    _write_block(fh, b"M", "meta", (len(meta),), meta)
    for name, t in ckpt.params.items():
        _write_block(fh, b"P", name, tuple(t.shape), _tensor_bytes(t))
    for name, t in ckpt.optimizer.items():
        _write_block(fh, b"O", name, tuple(t.shape), _tensor_bytes(t))
    for name, raw in ckpt.rng.items():
        _write_block(fh, b"R", name, (len(raw),), bytes(raw))
    fh.write(b"E")
    return fh.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a temp file in the target directory is renamed over ``path``."""
    path = Path(path)
    data = serialize(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint(path, expected: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; if ``expected`` is given, every model-shape key must agree."""
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = None
        params, optimizer, rng, meta = {}, {}, {}, {}
        while True:
            kind = _read(fh, 1)
            if kind == b"E":
                break
            (name_len,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, name_len).decode()
            (ndim,) = struct.unpack("<I", _read(fh, 4))
            shape = tuple(struct.unpack("<Q", _read(fh, 8))[0] for _ in range(ndim))
            (size,) = struct.unpack("<Q", _read(fh, 8))
            payload = _read(fh, size)
            if kind == b"C":
                config = RunConfig.from_text(payload.decode())
            elif kind == b"M":
                meta = json.loads(payload.decode())
            elif kind in (b"P", b"O"):
                arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
                (params if kind == b"P" else optimizer)[name] = torch.from_numpy(arr.astype(np.float32))
            elif kind == b"R":
                rng[name] = payload
            else:
                raise CheckpointError(f"unknown block kind {kind!r}")
    if config is None:
        raise CheckpointError("checkpoint has no config block")
    if expected is not None:
        check_compatible(config, expected)
    return Checkpoint(config, params, optimizer, rng, meta)


def check_compatible(found: RunConfig, expected: RunConfig) -> None:
    a, b = found.model_items(), expected.model_items()
    diff = sorted(k for k in a if k != "encoder.backbone" and a[k] != b[k])
    if diff:
        detail = ", ".join(f"{k}: checkpoint={a[k]!r} expected={b[k]!r}" for k in diff)
        raise IncompatibleConfig(f"checkpoint does not match model config ({detail})")
