"""Named tensor container and the ``LVTW`` binary weight format.

Layout (all integers little-endian)::

    magic      4 bytes  b"LVTW"
    version    u32
    count      u32
    count x {
        name_len  u16
        name      UTF-8, name_len bytes
        rank      u8
        extents   u64 x rank
        dtype     u8   (0 = float32, 1 = float64)
        data      raw little-endian values, row-major
        crc32     u32 of the raw data bytes
    }

The whole file is parsed and verified before anything is returned, so a
malformed file never yields a partially populated store.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"LVTW"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class WeightFormatError(ValueError):
    """Base class for unreadable or inconsistent weight files."""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class ChecksumError(WeightFormatError):
    pass


class UnknownDtypeError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    """Stored tensors do not match the model configuration."""


class WeightStore:
    """Ordered ``name -> ndarray`` mapping with unique names."""

    def __init__(self, tensors=None, version: int = FORMAT_VERSION):
        self.version = version
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> None:
        if name in self._tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def total_params(self) -> int:
        return sum(int(a.size) for a in self._tensors.values())

    @property
    def metadata(self) -> dict:
        return {"version": self.version, "tensors": len(self), "total_params": self.total_params}

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", self.version, len(self._tensors))]
        for name, arr in self._tensors.items():
            arr = np.asarray(arr)
            tag = _TAG_OF.get(arr.dtype)
            if tag is None:
                raise UnknownDtypeError(f"{name}: unsupported dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
                raise WeightFormatError(f"{name}: name or rank too large")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(struct.pack("<B", tag))
            parts.append(raw)
            parts.append(struct.pack("<I", zlib.crc32(raw) & 0xFFFFFFFF))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightStore":
        reader = _Reader(buf)
        if reader.take(4, "magic") != MAGIC:
            raise BadMagicError("not an LVTW weight file (bad magic bytes)")
        version, count = reader.unpack("<II", "header")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"weight format version {version}, expected {FORMAT_VERSION}")
        store = cls(version=version)
        for _ in range(count):
            (n,) = reader.unpack("<H", "name length")
            name = reader.take(n, "name").decode("utf-8")
            (rank,) = reader.unpack("<B", f"{name}: rank")
            shape = reader.unpack(f"<{rank}Q", f"{name}: extents")
            (tag,) = reader.unpack("<B", f"{name}: dtype")
            if tag not in DTYPE_TAGS:
                raise UnknownDtypeError(f"{name}: unknown dtype tag {tag}")
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = reader.take(nbytes, f"{name}: data")
            (crc,) = reader.unpack("<I", f"{name}: checksum")
            if zlib.crc32(raw) & 0xFFFFFFFF != crc:
                raise ChecksumError(f"{name}: CRC32 mismatch")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            store.add(name, arr)
        if reader.remaining():
            raise WeightFormatError(f"{reader.remaining()} trailing bytes after {count} tensors")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what}")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def remaining(self) -> int:
        return len(self.buf) - self.pos
