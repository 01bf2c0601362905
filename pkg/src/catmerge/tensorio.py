"""Checkpoints and the MTC1 binary tensor container.

File layout (all integers little-endian):

    bytes 0..3    magic ``MTC1``
    bytes 4..7    header length ``H`` as uint32
    bytes 8..8+H  UTF-8 JSON header
    remainder     payload: concatenated little-endian tensor data

The header is canonical JSON with keys in a fixed order so identical
checkpoints serialize to identical bytes::

    {"version": 1,
     "tensors": [{"name", "kind", "dtype", "shape", "offset", "nbytes"}, ...],
     "meta": {... keys sorted ...}}

Offsets are relative to the payload start, ascending, non-overlapping, and
8-byte aligned (gaps are zero-filled).  ``nbytes`` must equal
``prod(shape) * sizeof(dtype)``.  Float payloads must be finite.

In memory all float tensors are held as float64 (f32 files are widened on
load; the original storage dtype is remembered so a round trip is
bit-exact).  Label tensors use u32 and stay uint32.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
import tempfile
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"MTC1"

DTYPE_INFO = {
    "f32": ("<f4", 4),
    "f64": ("<f8", 8),
    "u32": ("<u4", 4),
}


class ContainerError(ValueError):
    """Base class for malformed containers and invalid checkpoints."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class OffsetError(ContainerError):
    pass


class NonFiniteError(ContainerError):
    pass


class ParamKind(str, enum.Enum):
    LINEAR_WEIGHT = "linear_weight"
    SCALE = "scale"
    SHIFT = "shift"
    FROZEN = "frozen"


# Rank constraints per kind; FROZEN carries anything (data, labels, masks).
_KIND_RANK = {
    ParamKind.LINEAR_WEIGHT: 2,
    ParamKind.SCALE: 1,
    ParamKind.SHIFT: 1,
}


@dataclasses.dataclass
class ParamEntry:
    kind: ParamKind
    array: np.ndarray
    store_dtype: str = "f64"


class Checkpoint:
    """Ordered, kind-tagged parameter set; immutable by convention."""

    def __init__(self, meta: Mapping[str, str] | None = None):
        self.entries: dict[str, ParamEntry] = {}
        self.meta: dict[str, str] = dict(meta or {})

    def add(
        self,
        name: str,
        kind: ParamKind,
        array: np.ndarray,
        store_dtype: str | None = None,
    ) -> None:
        if name in self.entries:
            raise ContainerError(f"duplicate tensor name {name!r}")
        kind = ParamKind(kind)
        array = np.asarray(array)
        if store_dtype is None:
            store_dtype = "u32" if array.dtype.kind == "u" else "f64"
        if store_dtype not in DTYPE_INFO:
            raise ContainerError(f"unknown dtype {store_dtype!r}")
        if store_dtype == "u32":
            if kind is not ParamKind.FROZEN:
                raise ContainerError("u32 tensors must be kind 'frozen'")
            array = array.astype(np.uint32)
        else:
            array = array.astype(np.float64)
            if store_dtype == "f32":
                # Keep only values exactly representable in f32 so that a
                # write/read cycle is bit-exact.
                narrowed = array.astype(np.float32).astype(np.float64)
                if not np.array_equal(narrowed, array):
                    raise ContainerError(
                        f"tensor {name!r} holds values not representable as f32"
                    )
        rank = _KIND_RANK.get(kind)
        if rank is not None and array.ndim != rank:
            raise ContainerError(
                f"tensor {name!r}: kind {kind.value} requires rank {rank}, "
                f"got shape {array.shape}"
            )
        if array.size == 0 or any(s < 1 for s in array.shape):
            raise ContainerError(f"tensor {name!r} has an empty dimension")
        self.entries[name] = ParamEntry(kind, array, store_dtype)

    def names(self) -> list[str]:
        return list(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, ParamEntry]]:
        return iter(self.entries.items())

    def __getitem__(self, name: str) -> ParamEntry:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bit-exact equality of entries and meta."""
    if a.meta != b.meta or a.names() != b.names():
        return False
    for name in a.names():
        ea, eb = a[name], b[name]
        if ea.kind is not eb.kind or ea.store_dtype != eb.store_dtype:
            return False
        if ea.array.shape != eb.array.shape:
            return False
        if ea.array.tobytes() != eb.array.tobytes():
            return False
    return True


def check_aligned(a: Checkpoint, b: Checkpoint) -> bool:
    """True iff names, kinds, dtypes, and shapes match pairwise in order."""
    if a.names() != b.names():
        return False
    for name in a.names():
        ea, eb = a[name], b[name]
        if ea.kind is not eb.kind:
            return False
        if ea.store_dtype != eb.store_dtype:
            return False
        if ea.array.shape != eb.array.shape:
            return False
    return True


def _validate_entry_for_write(name: str, entry: ParamEntry) -> None:
    rank = _KIND_RANK.get(entry.kind)
    if rank is not None and entry.array.ndim != rank:
        raise ContainerError(
            f"tensor {name!r}: kind {entry.kind.value} requires rank {rank}"
        )
    if entry.store_dtype in ("f32", "f64") and not np.all(np.isfinite(entry.array)):
        raise NonFiniteError(f"tensor {name!r} contains non-finite values")


def _payload_bytes(entry: ParamEntry) -> bytes:
    np_dtype, _ = DTYPE_INFO[entry.store_dtype]
    return np.ascontiguousarray(entry.array).astype(np_dtype).tobytes()


def _align8(n: int) -> int:
    return (n + 7) & ~7


def write_container(path: str | os.PathLike, checkpoint: Checkpoint) -> None:
    """Write a checkpoint to ``path``; validates everything before any I/O."""
    records = []
    blobs = []
    offset = 0
    for name, entry in checkpoint:
        _validate_entry_for_write(name, entry)
        blob = _payload_bytes(entry)
        _, size = DTYPE_INFO[entry.store_dtype]
        nbytes = int(np.prod(entry.array.shape)) * size
        if nbytes != len(blob):
            raise ContainerError(f"tensor {name!r}: inconsistent byte length")
        records.append(
            {
                "name": name,
                "kind": entry.kind.value,
                "dtype": entry.store_dtype,
                "shape": [int(s) for s in entry.array.shape],
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        blobs.append((offset, blob))
        offset = _align8(offset + nbytes)

    header = {
        "version": 1,
        "tensors": records,
        "meta": {k: checkpoint.meta[k] for k in sorted(checkpoint.meta)},
    }
    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode()

    total = 0 if not blobs else max(off + len(blob) for off, blob in blobs)
    payload = bytearray(total)
    for off, blob in blobs:
        payload[off : off + len(blob)] = blob

    data = (
        MAGIC
        + np.uint32(len(header_bytes)).tobytes()
        + header_bytes
        + bytes(payload)
    )
    # Atomic replace: never leave a partial file behind.
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str | os.PathLike) -> Checkpoint:
    """Read and validate an MTC1 container."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise TruncatedError(f"{path}: file shorter than the 8-byte preamble")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    header_len = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if len(data) < 8 + header_len:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("version") != 1:
        raise HeaderError(f"{path}: unsupported header version")

    payload = data[8 + header_len :]
    ckpt = Checkpoint(meta=header.get("meta", {}))
    prev_end = 0
    for rec in header.get("tensors", []):
        try:
            name = rec["name"]
            kind = ParamKind(rec["kind"])
            dtype = rec["dtype"]
            shape = tuple(int(s) for s in rec["shape"])
            offset = int(rec["offset"])
            nbytes = int(rec["nbytes"])
        except (KeyError, ValueError) as exc:
            raise HeaderError(f"{path}: malformed tensor record ({exc})") from exc
        if dtype not in DTYPE_INFO:
            raise HeaderError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        np_dtype, size = DTYPE_INFO[dtype]
        expected = int(np.prod(shape)) * size
        if nbytes != expected:
            raise HeaderError(
                f"{path}: tensor {name!r} nbytes {nbytes} != shape implies {expected}"
            )
        if offset % 8 != 0:
            raise OffsetError(f"{path}: tensor {name!r} offset {offset} not 8-aligned")
        if offset < prev_end:
            raise OffsetError(f"{path}: tensor {name!r} overlaps the previous tensor")
        prev_end = offset + nbytes
        if prev_end > len(payload):
            raise TruncatedError(
                f"{path}: payload shorter than tensor {name!r} requires"
            )
        raw = np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(shape)),
                            offset=offset).reshape(shape)
        if dtype in ("f32", "f64") and not np.all(np.isfinite(raw)):
            raise NonFiniteError(f"{path}: tensor {name!r} contains non-finite values")
        array = raw.astype(np.uint32 if dtype == "u32" else np.float64)
        ckpt.add(name, kind, array, store_dtype=dtype)
    return ckpt
