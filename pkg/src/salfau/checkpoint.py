"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SFAU1\\n"
    u32  tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   rank, then rank x u32 dims
        prod(dims) x f32
    optional: b"ADAM1\\n" followed by a second section of the same shape

The optimizer section stores ``m.<param>``, ``v.<param>`` and a one-element
``step`` tensor.
"""

from __future__ import annotations

import io
import os
import struct
from collections.abc import Mapping

import numpy as np

MODEL_MAGIC = b"SFAU1\n"
ADAM_MAGIC = b"ADAM1\n"


class CheckpointError(ValueError):
    pass


def _write_section(buf: io.BufferedIOBase, tensors: Mapping[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(model: Mapping[str, np.ndarray], optimizer: Mapping[str, np.ndarray] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    _write_section(buf, model)
    if optimizer is not None:
        buf.write(ADAM_MAGIC)
        _write_section(buf, optimizer)
    return buf.getvalue()


def save(path, model: Mapping[str, np.ndarray], optimizer: Mapping[str, np.ndarray] | None = None) -> None:
    data = dumps(model, optimizer)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_section(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I", "tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor #{i}")
        name = r.take(n, f"name of tensor #{i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of tensor {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of tensor {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"data of tensor {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return out


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None]:
    """Parse checkpoint bytes into (model tensors, optimizer tensors or None)."""
    if not data.startswith(MODEL_MAGIC):
        raise CheckpointError("not a SFAU1 checkpoint")
    r = _Reader(data)
    r.pos = len(MODEL_MAGIC)
    model = _read_section(r)
    optimizer = None
    if r.pos < len(data):
        if r.take(len(ADAM_MAGIC), "optimizer magic") != ADAM_MAGIC:
            raise CheckpointError(f"unexpected trailing data at byte {r.pos - len(ADAM_MAGIC)}")
        optimizer = _read_section(r)
        if r.pos != len(data):
            raise CheckpointError(f"unexpected trailing data at byte {r.pos}")
    return model, optimizer


def load(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None]:
    with open(path, "rb") as fh:
        return loads(fh.read())
