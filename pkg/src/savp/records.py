"""Binary tensor-record encoding shared by dataset (SVPD) and checkpoint (SVPC) files.

Layout, all integers little-endian::

    magic      4 bytes
    version    u32
    header     u32 length + bytes   (file-specific: scene description or JSON metadata)
    count      u32
    records    count x record
    trailer    u32 length + bytes   (file-specific; may be empty)

    record:
      name     u16 length + utf-8
      dtype    u8   (1=float32, 2=float64, 3=int64, 4=uint8)
      rank     u8
      extents  rank x u64
      nbytes   u64
      data     raw little-endian, row-major

Nothing is returned unless the whole file parses and ends exactly after the
trailer.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised for bad magic, unsupported version, truncation or trailing bytes."""


@dataclass
class RecordFile:
    magic: bytes
    header: bytes
    records: dict = field(default_factory=dict)
    trailer: bytes = b""
    version: int = FORMAT_VERSION


def _dtype_code(arr: np.ndarray) -> int:
    code = DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise TypeError(f"unsupported record dtype {arr.dtype} (use float32/float64/int64/uint8)")
    return code


def encode(rf: RecordFile) -> bytes:
    if len(rf.magic) != 4:
        raise ValueError("magic must be 4 bytes")
    out = io.BytesIO()
    out.write(rf.magic)
    out.write(struct.pack("<I", rf.version))
    out.write(struct.pack("<I", len(rf.header)))
    out.write(rf.header)
    out.write(struct.pack("<I", len(rf.records)))
    for name, arr in rf.records.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes()
        bname = name.encode("utf-8")
        out.write(struct.pack("<H", len(bname)))
        out.write(bname)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(struct.pack("<Q", len(raw)))
        out.write(raw)
    out.write(struct.pack("<I", len(rf.trailer)))
    out.write(rf.trailer)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : self.pos + n].tobytes()
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, magic: bytes, version: int = FORMAT_VERSION) -> RecordFile:
    r = _Reader(buf)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (ver,) = r.unpack("<I")
    if ver != version:
        raise FormatError(f"unsupported format version {ver} (expected {version})")
    (hlen,) = r.unpack("<I")
    header = r.take(hlen)
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise FormatError(f"record {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        (nbytes,) = r.unpack("<Q")
        dtype = CODE_DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise FormatError(f"record {name!r}: {nbytes} bytes for shape {shape} of {dtype}")
        records[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    (tlen,) = r.unpack("<I")
    trailer = r.take(tlen)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} unexpected trailing bytes")
    return RecordFile(magic, header, records, trailer, ver)


def write_file(path, rf: RecordFile) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(rf))


def read_file(path, magic: bytes) -> RecordFile:
    with open(path, "rb") as fh:
        return decode(fh.read(), magic)
