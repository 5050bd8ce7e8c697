"""Named parameter collections and their binary checkpoint format.

A :class:`ParamMap` holds the parameters of one model as named float32
tensors. Entries are always kept in lexicographic name order, which defines
the flattening used whenever a model is treated as a single vector.

Checkpoint byte layout (all integers little-endian)::

    offset  size      field
    0       8         magic  b"STUDPMAP"
    8       1         format version (uint8, currently 1)
    9       4         entry count (uint32)
    then, per entry in name order:
            2         name length in bytes (uint16)
            n         name, UTF-8
            1         rank (uint8)
            4*rank    dims (uint32 each)
            4*size    data, float32 little-endian, C order
    end-32  32        SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

MAGIC = b"STUDPMAP"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32


class AlignmentError(ValueError):
    """Raised when two parameter maps do not share names and shapes."""


class CheckpointError(Exception):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    """The file structure is inconsistent (truncated or malformed)."""


class ParamMap(Mapping[str, np.ndarray]):
    """Immutable, name-ordered mapping of float32 tensors.

    Parameters
    ----------
    entries : mapping or iterable of (name, array) pairs
        Arrays are copied and converted to float32. Insertion order is
        irrelevant; iteration is always lexicographic by name.
    """

    __slots__ = ("_data",)

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        data: dict[str, np.ndarray] = {}
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise ValueError("parameter names must be non-empty strings")
            if name in data:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(value, dtype=np.float32, order="C", copy=True)
            arr.setflags(write=False)
            data[name] = arr
        self._data = {k: data[k] for k in sorted(data)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{list(v.shape)}" for k, v in self._data.items())
        return f"ParamMap({body})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamMap):
            return NotImplemented
        return self.aligned(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def names(self) -> list[str]:
        return list(self._data)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [v.shape for v in self._data.values()]

    @property
    def size(self) -> int:
        """Total number of scalar parameters."""
        return sum(v.size for v in self._data.values())

    def aligned(self, other: ParamMap) -> bool:
        return self.names == other.names and self.shapes == other.shapes

    def flatten(self) -> np.ndarray:
        """Concatenate all entries in name order into one float64 vector."""
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()]).astype(np.float64)

    def unflatten(self, vector: np.ndarray) -> ParamMap:
        """Build a map with this map's layout from a flat vector."""
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {vector.shape}")
        out, pos = {}, 0
        for name, arr in self._data.items():
            out[name] = vector[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        return ParamMap(out)

    def map(self, fn) -> ParamMap:
        return ParamMap({k: fn(v) for k, v in self._data.items()})

    def to_dict(self, dtype=np.float64) -> dict[str, np.ndarray]:
        """Writable copies of every entry, e.g. for gradient code."""
        return {k: v.astype(dtype) for k, v in self._data.items()}

    def checksum(self) -> str:
        """Hex SHA-256 of the canonical serialized form."""
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def __add__(self, other: ParamMap) -> ParamMap:
        return axpy(1.0, other, self)

    def __sub__(self, other: ParamMap) -> ParamMap:
        return axpy(-1.0, other, self)

    def __mul__(self, scalar: float) -> ParamMap:
        return scale(scalar, self)

    __rmul__ = __mul__

    def __neg__(self) -> ParamMap:
        return scale(-1.0, self)


def check_aligned(x: ParamMap, y: ParamMap) -> None:
    """Raise :class:`AlignmentError` naming the first mismatching entry."""
    xn, yn = x.names, y.names
    for i in range(max(len(xn), len(yn))):
        a = xn[i] if i < len(xn) else None
        b = yn[i] if i < len(yn) else None
        if a != b:
            name = min(n for n in (a, b) if n is not None)
            raise AlignmentError(f"entry {name!r} is not present in both maps")
        if x[a].shape != y[b].shape:
            raise AlignmentError(
                f"entry {a!r} has shape {x[a].shape} vs {y[b].shape}"
            )


def axpy(a: float, x: ParamMap, y: ParamMap) -> ParamMap:
    """Entrywise ``a * x + y``."""
    check_aligned(x, y)
    return ParamMap(
        {k: (a * x[k].astype(np.float64) + y[k]).astype(np.float32) for k in x}
    )


def scale(a: float, x: ParamMap) -> ParamMap:
    return ParamMap({k: (a * x[k].astype(np.float64)).astype(np.float32) for k in x})


def zeros_like(x: ParamMap) -> ParamMap:
    return ParamMap({k: np.zeros_like(v) for k, v in x.items()})


def l2_norm(x: ParamMap) -> float:
    """Euclidean norm of the flattened map, accumulated in float64."""
    total = 0.0
    for v in x.values():
        v64 = v.astype(np.float64).ravel()
        total += float(v64 @ v64)
    return float(np.sqrt(total))


def distance(x: ParamMap, y: ParamMap) -> float:
    check_aligned(x, y)
    total = 0.0
    for k in x:
        d = x[k].astype(np.float64).ravel() - y[k].astype(np.float64).ravel()
        total += float(d @ d)
    return float(np.sqrt(total))


def weighted_sum(weights: Iterable[float], maps: Iterable[ParamMap]) -> ParamMap:
    """``sum_i w_i * maps[i]`` accumulated in float64."""
    weights, maps = list(weights), list(maps)
    if not maps or len(weights) != len(maps):
        raise ValueError("need one weight per map and at least one map")
    for m in maps[1:]:
        check_aligned(maps[0], m)
    out = {}
    for k in maps[0]:
        acc = np.zeros(maps[0][k].shape, dtype=np.float64)
        for w, m in zip(weights, maps):
            acc += w * m[k].astype(np.float64)
        out[k] = acc
    return ParamMap(out)


def to_bytes(params: ParamMap) -> bytes:
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> ParamMap:
    header = len(MAGIC) + 5
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a parameter checkpoint (bad magic)")
    if len(blob) < header + _DIGEST_SIZE:
        raise CorruptCheckpointError("checkpoint truncated before header end")
    version, count = struct.unpack_from("<BI", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format version {version}, expected {FORMAT_VERSION}"
        )
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatchError("checkpoint checksum mismatch")

    pos = header
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(body):
                raise CorruptCheckpointError(f"entry {name!r} data truncated")
            data = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            entries.append((name, data))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last entry")
    return ParamMap(entries)


def save(params: ParamMap, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load(path: str | Path) -> ParamMap:
    return from_bytes(Path(path).read_bytes())
