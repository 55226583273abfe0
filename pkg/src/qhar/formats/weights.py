"""QHW1 binary weight files.

Layout (all integers little-endian)::

    "QHW1"  u32 version=1  u32 record_count
    per record:
      u16 name_len, name (UTF-8)
      u8 kind, u8 rank, rank x u32 dims
      f32 w_scale, u8 w_zero_point, f32 out_scale, u8 out_zero_point
      prod(dims) x u8 weights
      dims[0] x i32 bias
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, TruncatedFileError, VersionMismatchError, WeightFormatError
from ..qtensor import QuantParams, QuantTensor

MAGIC = b"QHW1"
VERSION = 1


class RecordKind(enum.IntEnum):
    FUSED_CONV = 0
    FULLY_CONNECTED = 1
    FUSION = 2


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass(eq=False)
class WeightRecord:
    """One parametric layer. Scales are stored (and kept) at float32 precision."""

    name: str
    kind: RecordKind
    weights: np.ndarray
    bias: np.ndarray
    w_scale: float
    w_zero_point: int
    out_scale: float = 1.0
    out_zero_point: int = 0

    def __post_init__(self):
        self.kind = RecordKind(self.kind)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.uint8)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.int32).ravel()
        self.w_scale = _f32(self.w_scale)
        self.out_scale = _f32(self.out_scale)
        if self.weights.ndim == 0:
            raise ValueError(f"{self.name}: weights must have at least one dimension")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(f"{self.name}: bias length {self.bias.shape[0]} != leading dim {self.weights.shape[0]}")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.weights.shape

    @property
    def w_qp(self) -> QuantParams:
        return QuantParams(self.w_scale, self.w_zero_point)

    @property
    def out_qp(self) -> QuantParams:
        return QuantParams(self.out_scale, self.out_zero_point)

    def weight_tensor(self) -> QuantTensor:
        return QuantTensor(self.weights, self.w_qp)

    def __eq__(self, other):
        if not isinstance(other, WeightRecord):
            return NotImplemented
        return (self.name, self.kind, self.w_scale, self.w_zero_point, self.out_scale, self.out_zero_point) == \
            (other.name, other.kind, other.w_scale, other.w_zero_point, other.out_scale, other.out_zero_point) \
            and self.dims == other.dims and np.array_equal(self.weights, other.weights) \
            and np.array_equal(self.bias, other.bias)


@dataclass
class WeightSet:
    records: list[WeightRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_name(self) -> dict[str, WeightRecord]:
        return {r.name: r for r in self.records}


def encode_weights(ws: WeightSet) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(ws.records))
    for r in ws.records:
        name = r.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise WeightFormatError(f"layer name too long: {r.name[:40]}...")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", int(r.kind), r.weights.ndim)
        out += struct.pack(f"<{r.weights.ndim}I", *r.dims)
        out += struct.pack("<fBfB", r.w_scale, r.w_zero_point, r.out_scale, r.out_zero_point)
        out += r.weights.tobytes()
        out += r.bias.astype("<i4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0
        self.context = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"truncated in {self.context}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(buf: bytes) -> WeightSet:
    rd = _Reader(buf)
    magic = rd.take(4) if len(buf) >= 4 else buf
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported QHW version {version}, expected {VERSION}")
    records = []
    for i in range(count):
        rd.context = f"record {i}"
        (name_len,) = rd.unpack("<H")
        try:
            name = rd.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"record {i}: layer name is not UTF-8") from exc
        rd.context = f"record {i} ({name!r})"
        kind, rank = rd.unpack("<BB")
        try:
            kind = RecordKind(kind)
        except ValueError:
            raise WeightFormatError(f"{rd.context}: unknown layer kind {kind}") from None
        if rank == 0:
            raise WeightFormatError(f"{rd.context}: rank must be >= 1")
        dims = rd.unpack(f"<{rank}I")
        w_scale, w_zp, out_scale, out_zp = rd.unpack("<fBfB")
        size = int(np.prod(dims, dtype=np.int64))
        weights = np.frombuffer(rd.take(size), dtype=np.uint8).reshape(dims)
        bias = np.frombuffer(rd.take(4 * dims[0]), dtype="<i4")
        records.append(WeightRecord(name, kind, weights.copy(), bias.astype(np.int32),
                                    w_scale, w_zp, out_scale, out_zp))
    if rd.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - rd.pos} trailing bytes after {count} records")
    return WeightSet(records)


def write_weights(ws: WeightSet, path) -> None:
    Path(path).write_bytes(encode_weights(ws))


def read_weights(path) -> WeightSet:
    return decode_weights(Path(path).read_bytes())
