"""Named parameter collections and their binary checkpoint format.

A ParamSet is an ordered mapping of unique segment names to dense float64
arrays. Segment shapes are fixed at creation; values may be replaced
wholesale but never reshaped. The on-disk format ("MCMP") is:

    magic  "MCMP"            4 bytes
    version                  u32 LE (currently 1)
    segment count            u32 LE
    per segment:
        name length          u32 LE
        name                 UTF-8 bytes
        rank                 u32 LE
        dims                 rank x u64 LE
        values               f64 LE, row-major
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import FormatError, NumericError, StructuralError

MAGIC = b"MCMP"
VERSION = 1


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"segment {name!r} contains non-finite values")


class ParamSet:
    """Ordered named f64 segments with immutable shapes."""

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self._segments: dict[str, np.ndarray] = {}
        for name, arr in items:
            if name in self._segments:
                raise StructuralError(f"duplicate segment name {name!r}")
            arr = np.array(arr, dtype=np.float64, order="C")
            _check_finite(name, arr)
            self._segments[name] = arr

    # Mapping-style access -------------------------------------------------

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __setitem__(self, name: str, arr: np.ndarray) -> None:
        if name not in self._segments:
            raise StructuralError(f"unknown segment {name!r}")
        arr = np.array(arr, dtype=np.float64, order="C")
        if arr.shape != self._segments[name].shape:
            raise StructuralError(
                f"segment {name!r} shape {arr.shape} != {self._segments[name].shape}"
            )
        _check_finite(name, arr)
        self._segments[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def items(self):
        return self._segments.items()

    def names(self) -> list[str]:
        return list(self._segments)

    @property
    def total_count(self) -> int:
        return sum(a.size for a in self._segments.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._segments.items()})

    def aligned_with(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(self[k].shape == other[k].shape for k in self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.aligned_with(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    # Serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<I", VERSION)
        out += struct.pack("<I", len(self._segments))
        for name, arr in self._segments.items():
            nb = name.encode("utf-8")
            out += struct.pack("<I", len(nb))
            out += nb
            out += struct.pack("<I", arr.ndim)
            for d in arr.shape:
                out += struct.pack("<Q", d)
            out += arr.astype("<f8", copy=False).tobytes(order="C")
        return bytes(out)

    @staticmethod
    def from_bytes(blob: bytes) -> "ParamSet":
        r = _Reader(blob)
        magic = r.read(4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        version = r.u32("version")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        count = r.u32("segment count")
        segments: list[tuple[str, np.ndarray]] = []
        for _ in range(count):
            nlen = r.u32("name length")
            name = r.read(nlen, "name").decode("utf-8")
            rank = r.u32("rank")
            dims = tuple(r.u64("dim") for _ in range(rank))
            n = 1
            for d in dims:
                n *= d
            raw = r.read(8 * n, f"values of {name!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
            segments.append((name, arr))
        if r.pos != len(blob):
            raise FormatError(f"{len(blob) - r.pos} trailing bytes", r.pos)
        return ParamSet(segments)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @staticmethod
    def load(path) -> "ParamSet":
        with open(path, "rb") as f:
            return ParamSet.from_bytes(f.read())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.read(8, what))[0]
