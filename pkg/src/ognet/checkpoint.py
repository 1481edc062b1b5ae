"""Binary checkpoint format.

Layout (all little-endian):
  magic "OGN1" | u32 version | u8 stage | u64 seed
  u32 config-length | config key-value text (the architecture echo)
  u32 blob-count | blobs               (parameters, then batch-norm buffers)
  u8 has-optimizer | [u32 blob-count | blobs]   (momentum buffers)

Blob: u16 name-length | name utf-8 | u8 ndim | u32 dims... | float32 data.
Loading rejects any magic/version/config/shape mismatch.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OGN1"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or mismatched checkpoint file."""


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _read_blobs(reader: _Reader) -> dict[str, np.ndarray]:
    count = reader.unpack("<I")
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.unpack("<H")).decode("utf-8")
        ndim = reader.unpack("<B")
        shape = tuple(reader.unpack("<I") for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(size * 4), dtype="<f4").reshape(shape)
        blobs[name] = data.copy()
    return blobs


def _model_blobs(model) -> list[tuple[str, np.ndarray]]:
    blobs = [(name, p.data) for name, p in model.named_params()]
    blobs.extend((name, buf) for name, buf in model.named_buffers())
    return blobs


def save_checkpoint(model, path, *, stage: int = 0, seed: int | None = None,
                    optimizer_state: dict | None = None) -> None:
    config_text = model.config.to_kv().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<B", stage),
             struct.pack("<Q", model.seed if seed is None else int(seed)),
             struct.pack("<I", len(config_text)), config_text]
    blobs = _model_blobs(model)
    parts.append(struct.pack("<I", len(blobs)))
    parts.extend(_pack_blob(name, arr) for name, arr in blobs)
    if optimizer_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<I", len(optimizer_state)))
        parts.extend(_pack_blob(name, arr) for name, arr in sorted(optimizer_state.items()))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint_header(path):
    """(config-kv-text, stage, seed) without loading any blobs."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stage = reader.unpack("<B")
    seed = reader.unpack("<Q")
    config_text = reader.take(reader.unpack("<I")).decode("utf-8")
    return config_text, stage, seed


def load_checkpoint(model, path):
    """Load parameters and buffers into a model with a matching config.

    Returns (stage, seed, optimizer_state-or-None).
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stage = reader.unpack("<B")
    seed = reader.unpack("<Q")
    config_text = reader.take(reader.unpack("<I")).decode("utf-8")
    expected = model.config.to_kv()
    if config_text != expected:
        raise CheckpointError(
            f"{path}: config mismatch\ncheckpoint:\n{config_text}\nmodel:\n{expected}")
    blobs = _read_blobs(reader)
    targets = _model_blobs(model)
    names = {name for name, _ in targets}
    if set(blobs) != names:
        missing = names - set(blobs)
        extra = set(blobs) - names
        raise CheckpointError(f"{path}: blob set mismatch (missing {missing}, extra {extra})")
    for name, arr in targets:
        stored = blobs[name]
        if stored.shape != arr.shape:
            raise CheckpointError(
                f"{path}: blob {name} has shape {stored.shape}, model expects {arr.shape}")
        arr[...] = stored.astype(arr.dtype)
    model.seed = seed  # the model now mirrors the stored state, re-saving is bit-identical
    optimizer_state = None
    if reader.unpack("<B"):
        optimizer_state = {name: arr for name, arr in _read_blobs(reader).items()}
    return stage, seed, optimizer_state
