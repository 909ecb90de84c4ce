"""Bit-exact parameter files.

Layout: ``RELCAT01`` magic, u32 tensor count, then per tensor a u16 name
length, the UTF-8 name, a u8 rank, ``rank`` u32 dims and the row-major
little-endian float32 payload.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"RELCAT01"


class WeightFileError(Exception):
    pass


class MagicMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.tensor = name


def save_weights(model: nn.Module | dict, path: str | Path) -> None:
    state = model.state_dict() if isinstance(model, nn.Module) else model
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name, t in state.items():
        if t.dtype != torch.float32:
            raise TypeError(f"{name}: only float32 tensors are stored losslessly (got {t.dtype})")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.detach().contiguous().numpy().astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                                     f"{len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def read_weights(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for i in range(count):
        (n,) = struct.unpack("<H", r.take(2, f"name length of tensor {i}"))
        name = r.take(n, f"name of tensor {i}").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        out[name] = torch.from_numpy(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims))
    if r.pos != len(r.data):
        raise WeightFileError(f"{len(r.data) - r.pos} trailing bytes after {count} tensors")
    return out


def load_weights(path: str | Path, model: nn.Module) -> nn.Module:
    """Fill ``model`` (built from its config) with the stored parameters."""
    stored = read_weights(path)
    expected = model.state_dict()
    for name, t in expected.items():
        if name not in stored:
            raise ShapeMismatchError(name, "missing from weight file")
        if tuple(stored[name].shape) != tuple(t.shape):
            raise ShapeMismatchError(name, f"stored shape {tuple(stored[name].shape)} != expected {tuple(t.shape)}")
    extra = [n for n in stored if n not in expected]
    if extra:
        raise ShapeMismatchError(extra[0], "not present in the configured model")
    model.load_state_dict(stored)
    return model
