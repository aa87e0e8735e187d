"""In-memory snapshots and the STCKPT1 on-disk checkpoint format.

Layout (little endian)::

    b"STCKPT1"
    u32 n_params, then per tensor: u32 rank, u32 dims[rank], f32 payload
    u32 n_buffers, same per-tensor layout
    u32 epoch            (trailing; absent in older files -> 0)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchitectureMismatch, CorruptPayload, IoFailure
from .nn import Network
from .optim import OptimizerState

MAGIC = b"STCKPT1"


@dataclass
class Checkpoint:
    epoch: int
    params: list[np.ndarray]
    buffers: list[np.ndarray] = field(default_factory=list)


def snapshot(net: Network, opt: OptimizerState | None = None, epoch: int = 0) -> Checkpoint:
    params = [p.copy() for p in net.parameters()]
    buffers = [] if opt is None else [b.copy() for group in opt.momentum_buffers for b in group]
    return Checkpoint(epoch, params, buffers)


def restore(net: Network, opt: OptimizerState | None, ckpt: Checkpoint):
    """Write the checkpoint back into ``net`` (and ``opt`` when given), bit-exactly."""
    current = net.parameters()
    if len(current) != len(ckpt.params) or any(
        c.shape != s.shape for c, s in zip(current, ckpt.params)
    ):
        raise ArchitectureMismatch("checkpoint parameters do not match network layout")
    if opt is not None and ckpt.buffers:
        bufs = [b for group in opt.momentum_buffers for b in group]
        if len(bufs) != len(ckpt.buffers) or any(b.shape != s.shape for b, s in zip(bufs, ckpt.buffers)):
            raise ArchitectureMismatch("checkpoint buffers do not match optimizer layout")
        for b, s in zip(bufs, ckpt.buffers):
            b[...] = s
    for c, s in zip(current, ckpt.params):
        c[...] = s


def _pack_tensors(tensors) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for t in tensors:
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayload("truncated payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise CorruptPayload(f"implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)

    def tensors(self) -> list[np.ndarray]:
        return [self.tensor() for _ in range(self.u32())]


def to_bytes(ckpt: Checkpoint) -> bytes:
    return MAGIC + _pack_tensors(ckpt.params) + _pack_tensors(ckpt.buffers) + struct.pack("<I", ckpt.epoch)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CorruptPayload("missing STCKPT1 magic")
    r = _Reader(data, len(MAGIC))
    params = r.tensors()
    buffers = r.tensors()
    epoch = r.u32() if r.pos < len(data) else 0
    if r.pos != len(data):
        raise CorruptPayload("trailing bytes after checkpoint payload")
    return Checkpoint(epoch, params, buffers)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return from_bytes(data)
