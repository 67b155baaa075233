"""Containers and binary file formats for features, labels, codebooks and codes.

Every format starts with a 4-byte magic and a little-endian u32 version.
Reals are stored as float32 little-endian; in memory they are float64.

    features   SQFT | version | n u64 | dim u32 | n*dim f32
    labels     SQLB | version | n u64 | l u32   | n u32
    codes      SQCD | version | n u64 | m u32   | h u32 | n*m u8
    codebooks  SQCB | version | m u32 | h u32   | p u32 | m*h*p f32
    sparse cb  SQSC | version | m u32 | h u32   | p u32 | per codeword: count u32, count*(u32 idx, f32 val)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class FormatError(ValueError):
    """Raised when a file does not match its declared binary layout."""


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"feature matrix must be 2-D and non-empty, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature matrix contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        y = np.asarray(self.labels)
        if y.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        y = y.astype(np.int64)
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class Codebooks:
    codewords: np.ndarray  # (m, h, p)

    def __post_init__(self):
        c = np.asarray(self.codewords, dtype=np.float64)
        if c.ndim != 3:
            raise ValueError(f"codebooks must be (m, h, p), got shape {c.shape}")
        m, h, p = c.shape
        if m < 1 or h < 2 or p < 1:
            raise ValueError(f"invalid codebook shape (m={m}, h={h}, p={p})")
        if not np.all(np.isfinite(c)):
            raise ValueError("codebooks contain non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "codewords", c)

    @property
    def m(self) -> int:
        return self.codewords.shape[0]

    @property
    def h(self) -> int:
        return self.codewords.shape[1]

    @property
    def p(self) -> int:
        return self.codewords.shape[2]


@dataclass(frozen=True)
class CodeMatrix:
    codes: np.ndarray  # (n, m) uint8
    h: int

    def __post_init__(self):
        b = np.asarray(self.codes)
        if b.ndim != 2:
            raise ValueError(f"codes must be (n, m), got shape {b.shape}")
        if not 2 <= self.h <= 256:
            raise ValueError(f"h must lie in [2, 256] for byte codes, got {self.h}")
        if b.size and (b.min() < 0 or b.max() >= self.h):
            raise ValueError(f"code indices must lie in [0, {self.h})")
        b = b.astype(np.uint8)
        b.setflags(write=False)
        object.__setattr__(self, "codes", b)

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def m(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class CenterTable:
    centers: np.ndarray  # (l, p)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError(f"centers must be (l, p), got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centers contain non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def p(self) -> int:
        return self.centers.shape[1]


def l2_normalize_rows(matrix, tol: float = 1e-12) -> np.ndarray:
    """Scale every row to unit Euclidean norm.

    Raises:
        ValueError: if any row has norm below ``tol``; the message names the
            first offending row.
    """
    v = np.asarray(matrix, dtype=np.float64)
    squeeze = v.ndim == 1
    v = np.atleast_2d(v)
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(~(norms >= tol))
    if bad.size:
        raise ValueError(f"row {bad[0]} has norm {norms[bad[0]]:.3g}; cannot normalize a zero vector")
    out = v / norms[:, None]
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# binary helpers


def _write(path, chunks) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, magic: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path
        head = self.take(4, "magic")
        if head != magic:
            raise FormatError(f"{path}: bad magic {head!r} at byte offset 0, expected {magic!r}")
        (version,) = self.unpack("<I", "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte offset 4")

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated payload reading {what} at byte offset {self.pos} "
                f"(need {size} bytes, have {len(self.buf) - self.pos})"
            )
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: np.dtype, count: int, what: str) -> np.ndarray:
        start = self.pos
        arr = np.frombuffer(self.take(count * dtype.itemsize, what), dtype=dtype)
        if dtype.kind == "f":
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                off = start + int(bad[0]) * dtype.itemsize
                raise FormatError(f"{self.path}: non-finite {what} entry at byte offset {off}")
        return arr

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes at byte offset {self.pos}")


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<I", FORMAT_VERSION)


# ---------------------------------------------------------------------------
# features


def save_features(matrix, path) -> None:
    v = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix)
    n, dim = v.shape
    _write(path, [_header(b"SQFT"), struct.pack("<QI", n, dim), v.astype(_F32).tobytes()])


def load_features(path) -> FeatureMatrix:
    r = _Reader(_read(path), b"SQFT", path)
    n, dim = r.unpack("<QI", "shape")
    values = r.array(_F32, n * dim, "feature")
    r.finish()
    return FeatureMatrix(values.reshape(n, dim).astype(np.float64))


# ---------------------------------------------------------------------------
# labels


def save_labels(labels, path, num_classes: int | None = None) -> None:
    if isinstance(labels, LabelVector):
        y, l = labels.labels, labels.num_classes
    else:
        y = np.asarray(labels)
        l = int(y.max()) + 1 if num_classes is None else num_classes
    _write(path, [_header(b"SQLB"), struct.pack("<QI", y.shape[0], l), y.astype(_U32).tobytes()])


def load_labels(path) -> LabelVector:
    r = _Reader(_read(path), b"SQLB", path)
    n, l = r.unpack("<QI", "shape")
    y = r.array(_U32, n, "label")
    r.finish()
    return LabelVector(y.astype(np.int64), int(l))


# ---------------------------------------------------------------------------
# codes


def save_codes(codes, path, h: int | None = None) -> None:
    if isinstance(codes, CodeMatrix):
        b, h = codes.codes, codes.h
    else:
        b = np.asarray(codes)
        if h is None:
            raise ValueError("h is required when saving a raw code array")
        b = CodeMatrix(b, h).codes
    n, m = b.shape
    _write(path, [_header(b"SQCD"), struct.pack("<QII", n, m, h), np.ascontiguousarray(b, dtype=np.uint8).tobytes()])


def load_codes(path) -> CodeMatrix:
    r = _Reader(_read(path), b"SQCD", path)
    n, m, h = r.unpack("<QII", "shape")
    b = r.array(np.dtype(np.uint8), n * m, "code")
    r.finish()
    if b.size and b.max() >= h:
        raise FormatError(f"{path}: code index {int(b.max())} out of range for h={h}")
    return CodeMatrix(b.reshape(n, m), int(h))


# ---------------------------------------------------------------------------
# codebooks


def save_codebooks(codebooks, path) -> None:
    c = codebooks.codewords if isinstance(codebooks, Codebooks) else np.asarray(codebooks)
    m, h, p = c.shape
    _write(path, [_header(b"SQCB"), struct.pack("<III", m, h, p), c.astype(_F32).tobytes()])


def load_codebooks(path) -> Codebooks:
    r = _Reader(_read(path), b"SQCB", path)
    m, h, p = r.unpack("<III", "shape")
    c = r.array(_F32, m * h * p, "codeword")
    r.finish()
    return Codebooks(c.reshape(m, h, p).astype(np.float64))


def save_sparse_codebooks(sparse, path) -> None:
    """Write a :class:`~spherequant.search.SparseCodebooks` as count + (index, value) lists."""
    chunks = [_header(b"SQSC"), struct.pack("<III", sparse.m, sparse.h, sparse.p)]
    pair = np.dtype([("idx", _U32), ("val", _F32)])
    for w in range(sparse.m * sparse.h):
        lo, hi = sparse.indptr[w], sparse.indptr[w + 1]
        rec = np.empty(hi - lo, dtype=pair)
        rec["idx"] = sparse.indices[lo:hi]
        rec["val"] = sparse.values[lo:hi]
        chunks.append(struct.pack("<I", hi - lo))
        chunks.append(rec.tobytes())
    _write(path, chunks)


def load_sparse_codebooks(path):
    from .search import SparseCodebooks

    r = _Reader(_read(path), b"SQSC", path)
    m, h, p = r.unpack("<III", "shape")
    pair = np.dtype([("idx", _U32), ("val", _F32)])
    indptr = np.zeros(m * h + 1, dtype=np.int64)
    idx_parts, val_parts = [], []
    for w in range(m * h):
        (count,) = r.unpack("<I", "codeword count")
        start = r.pos
        rec = np.frombuffer(r.take(count * pair.itemsize, "codeword entries"), dtype=pair)
        if not np.all(np.isfinite(rec["val"])):
            raise FormatError(f"{path}: non-finite codeword value near byte offset {start}")
        if rec.size and (rec["idx"].max() >= p or np.any(np.diff(rec["idx"].astype(np.int64)) <= 0)):
            raise FormatError(f"{path}: codeword indices unsorted or out of range at byte offset {start}")
        idx_parts.append(rec["idx"].astype(np.int64))
        val_parts.append(rec["val"].astype(np.float64))
        indptr[w + 1] = indptr[w] + count
    r.finish()
    cat = lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dt)  # noqa: E731
    return SparseCodebooks(m, h, p, indptr, cat(idx_parts, np.int64), cat(val_parts, np.float64))
