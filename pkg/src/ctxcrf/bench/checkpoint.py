"""Binary checkpoints.

Layout (little-endian)::

    b"CTXCRF01"  u32 version  32-byte config digest  u32 tensor count
    per tensor:  u32 name length, UTF-8 name, u32 rank, u32 dims..., float32 data

Tensor names are ``<potential>/<parameter>``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..potentials import ContextCRF
from .config import ExperimentConfig

MAGIC = b"CTXCRF01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


def model_tensors(model: ContextCRF) -> dict[str, np.ndarray]:
    out = {}
    for owner, store in model.param_stores().items():
        for name, t in store.items():
            out[f"{owner}/{name}"] = t.data
    return out


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], digest: bytes, version: int = FORMAT_VERSION) -> None:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    chunks = [MAGIC, struct.pack("<I", version), digest, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensors(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    rd = _Reader(Path(path).read_bytes())
    if rd.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a checkpoint")
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version} (expected {FORMAT_VERSION})")
    digest = rd.take(32)
    tensors = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).copy()
    if rd.pos != len(rd.data):
        raise CheckpointError(f"{path}: {len(rd.data) - rd.pos} trailing bytes")
    return digest, tensors


def save_checkpoint(path: str | Path, model: ContextCRF, config: ExperimentConfig) -> None:
    write_tensors(path, model_tensors(model), config.model_digest())


def load_checkpoint(path: str | Path, config: ExperimentConfig) -> ContextCRF:
    digest, tensors = read_tensors(path)
    if digest != config.model_digest():
        raise DigestMismatchError(f"{path}: checkpoint was written for a different model configuration")
    model = ContextCRF(config.nets(), seed=config.seed)
    for owner, store in model.param_stores().items():
        prefix = owner + "/"
        state = {k[len(prefix):]: v.astype(np.float64) for k, v in tensors.items() if k.startswith(prefix)}
        store.load_state(state)
    return model
