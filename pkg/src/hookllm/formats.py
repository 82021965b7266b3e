"""Binary containers: ``.qkc`` Q/K captures and ``STV1`` steering vectors.

All integers are little-endian u32 and all tensors little-endian float32.

QKC layout::

    b"QKC1"
    u32 run_id_len, run_id (UTF-8)
    u32 entry_count
    per entry:
        u32 name_len, name (UTF-8)
        u32 layer_num
        u32 batch_index
        u32 q_ndim, u32 q_dims[q_ndim], f32 q_data
        u32 k_ndim, u32 k_dims[k_ndim], f32 k_all_data

STV1 layout::

    b"STV1", u32 layer, u32 d_model, f32 vector[d_model]
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

QKC_MAGIC = b"QKC1"
STV_MAGIC = b"STV1"
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """Container bytes are corrupt, truncated or of the wrong kind."""


@dataclass
class QKEntry:
    """Q/K of one attention module for one prompt.

    ``q`` holds ``[n_q, n_heads, d_head]`` rows for the last ``n_q``
    positions of ``k_all`` (``[t, n_heads, d_head]``).
    """

    name: str
    layer_num: int
    q: np.ndarray
    k_all: np.ndarray
    batch: int = 0

    @property
    def query_positions(self) -> np.ndarray:
        t, n_q = self.k_all.shape[0], self.q.shape[0]
        return np.arange(t - n_q, t)


@dataclass
class QKCapture:
    run_id: str
    entries: list[QKEntry] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def layers(self) -> list[int]:
        return sorted({e.layer_num for e in self.entries})

    @property
    def batch_size(self) -> int:
        return max((e.batch for e in self.entries), default=-1) + 1

    def entry(self, layer: int, batch: int = 0) -> QKEntry:
        for e in self.entries:
            if e.layer_num == layer and e.batch == batch:
                return e
        raise KeyError(f"layer {layer} (batch {batch}) not in capture; captured layers: {self.layers}")

    def batch_item(self, batch: int) -> "QKCapture":
        """The sub-capture of one prompt, re-indexed as batch 0."""
        picked = [
            QKEntry(e.name, e.layer_num, e.q, e.k_all, 0) for e in self.entries if e.batch == batch
        ]
        if not picked:
            raise KeyError(f"batch item {batch} not in capture of size {self.batch_size}")
        return QKCapture(self.run_id, picked)


def _write_str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(_U32.pack(len(b)))
    fh.write(b)


def _write_array(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(_U32.pack(a.ndim))
    for d in a.shape:
        fh.write(_U32.pack(d))
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.source}: invalid UTF-8 string") from exc

    def array(self) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise FormatError(f"{self.source}: implausible tensor rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def dumps_qkc(capture: QKCapture) -> bytes:
    buf = io.BytesIO()
    buf.write(QKC_MAGIC)
    _write_str(buf, capture.run_id)
    buf.write(_U32.pack(len(capture.entries)))
    for e in capture.entries:
        _write_str(buf, e.name)
        buf.write(_U32.pack(e.layer_num))
        buf.write(_U32.pack(e.batch))
        _write_array(buf, e.q)
        _write_array(buf, e.k_all)
    return buf.getvalue()


def loads_qkc(data: bytes, source: str = "<bytes>") -> QKCapture:
    r = _Reader(data, source)
    if data[:4] != QKC_MAGIC:
        raise FormatError(f"{source}: not a QKC file (magic {data[:4]!r})")
    r.take(4)
    run_id = r.string()
    entries = []
    for _ in range(r.u32()):
        name = r.string()
        layer = r.u32()
        batch = r.u32()
        q = r.array()
        k = r.array()
        if q.ndim != 3 or k.ndim != 3 or q.shape[1:] != k.shape[1:] or q.shape[0] > k.shape[0]:
            raise FormatError(f"{source}: inconsistent q {q.shape} / k_all {k.shape} for {name}")
        entries.append(QKEntry(name, layer, q, k, batch))
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes")
    return QKCapture(run_id, entries)


def atomic_write(path: Union[str, Path], data: bytes) -> Path:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_qkc(path: Union[str, Path], capture: QKCapture) -> Path:
    return atomic_write(path, dumps_qkc(capture))


def read_qkc(path: Union[str, Path]) -> QKCapture:
    path = Path(path)
    return loads_qkc(path.read_bytes(), str(path))


def write_steering_vector(path: Union[str, Path], layer: int, vector: np.ndarray) -> Path:
    v = np.asarray(vector, dtype=np.float32).reshape(-1)
    return atomic_write(path, STV_MAGIC + struct.pack("<II", layer, v.size) + v.astype("<f4").tobytes())


def read_steering_vector(path: Union[str, Path]) -> tuple[int, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != STV_MAGIC or len(data) < 12:
        raise FormatError(f"{path}: not a steering-vector file")
    layer, d_model = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * d_model:
        raise FormatError(f"{path}: expected {d_model} floats, file has {(len(data) - 12) / 4}")
    return layer, np.frombuffer(data, dtype="<f4", offset=12).astype(np.float32)
