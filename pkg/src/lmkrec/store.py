"""Descriptor sets and the LMKE binary container.

Layout (little-endian)::

    0..3   magic b"LMKE"
    4..7   version u32 (= 1)
    8      flags u8   bit0 normalized, bit1 labels present
    9..12  d u32
    13..20 n u64
    n*d float32 row-major payload
    n newline-terminated UTF-8 ids
    n int64 labels (only when bit1 is set)
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    EmptySetError,
    FormatError,
    IntegrityError,
    IoError,
    TruncationError,
    ZeroVectorError,
)

MAGIC = b"LMKE"
VERSION = 1
HEADER = struct.Struct("<4sIBIQ")
FLAG_NORMALIZED = 0x01
FLAG_LABELS = 0x02

NON_LANDMARK = -1
DEFAULT_DIM = 512
NORM_TOL = 1e-5
ZERO_TOL = 1e-12

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Immutable n x d float32 descriptor matrix with image ids.

    ``labels`` holds landmark ids (``-1`` marks a non-landmark image) and is
    either ``None`` or an int64 array of length n.
    """

    ids: tuple
    matrix: np.ndarray
    labels: Optional[np.ndarray] = None
    normalized: bool = False
    _row_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        matrix = np.array(self.matrix, dtype="<f4", order="C", copy=True)
        if matrix.ndim != 2:
            raise IntegrityError(f"matrix must be 2-D, got shape {matrix.shape}")
        n, d = matrix.shape
        if d < 1:
            raise IntegrityError("descriptor dimension must be >= 1")
        if len(ids) != n:
            raise IntegrityError(f"{len(ids)} ids for {n} rows")
        row_of = {}
        for i, item in enumerate(ids):
            if "\n" in item:
                raise IntegrityError(f"id {item!r} contains a newline")
            if item in row_of:
                raise IntegrityError(f"duplicate id {item!r}")
            row_of[item] = i
        labels = self.labels
        if labels is not None:
            labels = np.array(labels, dtype="<i8", copy=True).reshape(-1)
            if labels.shape[0] != n:
                raise IntegrityError(f"{labels.shape[0]} labels for {n} rows")
            if n and labels.min() < NON_LANDMARK:
                raise IntegrityError("landmark labels must be >= -1")
            labels.setflags(write=False)
        if not np.all(np.isfinite(matrix)):
            raise IntegrityError("descriptor matrix contains non-finite values")
        if self.normalized and n:
            norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
            if bad.size:
                raise IntegrityError(
                    f"set flagged normalized but row {ids[bad[0]]!r} has norm {norms[bad[0]]:.8f}"
                )
        matrix.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "normalized", bool(self.normalized))
        object.__setattr__(self, "_row_of", row_of)

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, item_id: str) -> int:
        return self._row_of[item_id]

    def label_of(self, item_id: str) -> int:
        if self.labels is None:
            raise IntegrityError("set carries no labels")
        return int(self.labels[self._row_of[item_id]])

    def equals(self, other: "DescriptorSet") -> bool:
        """Bit-exact comparison of matrix bytes, ids, labels and flags."""
        if self.ids != other.ids or self.normalized != other.normalized:
            return False
        if self.matrix.shape != other.matrix.shape:
            return False
        if self.matrix.tobytes() != other.matrix.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    def take(self, rows: Sequence[int]) -> "DescriptorSet":
        rows = np.asarray(rows, dtype=np.int64)
        return DescriptorSet(
            ids=[self.ids[r] for r in rows],
            matrix=self.matrix[rows],
            labels=None if self.labels is None else self.labels[rows],
            normalized=self.normalized,
        )


def l2_normalize(dset: DescriptorSet) -> DescriptorSet:
    """Scale every row to unit L2 norm; raises on an all-zero row."""
    mat = dset.matrix.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
    zero = np.flatnonzero(norms <= ZERO_TOL)
    if zero.size:
        bad = dset.ids[zero[0]]
        raise ZeroVectorError(f"descriptor {bad!r} is a zero vector", item_id=bad)
    return DescriptorSet(
        ids=dset.ids,
        matrix=(mat / norms[:, None]).astype(np.float32),
        labels=dset.labels,
        normalized=True,
    )


def encoded_size(n: int, d: int, ids: Sequence[str], with_labels: bool) -> int:
    id_bytes = sum(len(s.encode("utf-8")) + 1 for s in ids)
    return HEADER.size + 4 * n * d + id_bytes + (8 * n if with_labels else 0)


def to_bytes(dset: DescriptorSet) -> bytes:
    n, d = dset.matrix.shape
    flags = (FLAG_NORMALIZED if dset.normalized else 0) | (
        FLAG_LABELS if dset.labels is not None else 0
    )
    parts = [
        HEADER.pack(MAGIC, VERSION, flags, d, n),
        dset.matrix.astype("<f4", copy=False).tobytes(order="C"),
        "".join(f"{s}\n" for s in dset.ids).encode("utf-8"),
    ]
    if dset.labels is not None:
        parts.append(dset.labels.astype("<i8", copy=False).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> DescriptorSet:
    if len(buf) < HEADER.size:
        if not MAGIC.startswith(buf[:4]):
            raise FormatError("bad magic")
        raise TruncationError(f"header needs {HEADER.size} bytes, file has {len(buf)}")
    magic, version, flags, d, n = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if flags & ~(FLAG_NORMALIZED | FLAG_LABELS):
        raise FormatError(f"unknown flag bits 0x{flags:02x}")
    if d < 1:
        raise FormatError("dimension must be >= 1")

    pos = HEADER.size
    payload = 4 * n * d
    if len(buf) - pos < payload:
        raise TruncationError(
            f"header declares {n}x{d} payload ({payload} bytes), only {len(buf) - pos} present"
        )
    matrix = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    pos += payload

    ids = []
    for _ in range(n):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise TruncationError(f"ids sidecar ends after {len(ids)} of {n} ids")
        try:
            ids.append(buf[pos:end].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"id {len(ids)} is not valid UTF-8") from exc
        pos = end + 1

    labels = None
    if flags & FLAG_LABELS:
        if len(buf) - pos < 8 * n:
            raise TruncationError("labels sidecar truncated")
        labels = np.frombuffer(buf, dtype="<i8", count=n, offset=pos)
        pos += 8 * n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after declared content")

    return DescriptorSet(
        ids=ids, matrix=matrix, labels=labels, normalized=bool(flags & FLAG_NORMALIZED)
    )


def save_descriptors(dset: DescriptorSet, path: PathLike) -> None:
    """Write ``dset`` atomically (temp file in the target dir, then rename)."""
    if len(dset) == 0:
        raise EmptySetError("refusing to write an empty descriptor set")
    path = Path(path)
    data = to_bytes(dset)
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


def load_descriptors(path: PathLike) -> DescriptorSet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return from_bytes(buf)
