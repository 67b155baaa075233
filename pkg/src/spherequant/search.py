"""Asymmetric inner-product search over quantized codes.

A query is embedded once, its inner products with every codeword go into an
(m, h) lookup table, and the score of a database point is the sum of m table
entries selected by its code. On the unit sphere ranking by this score is
ranking by Euclidean distance, ``||q - x||^2 = 2 - 2<q, x>``.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embedder import EmbedderParams, embed

_SHARD = 65536


@dataclass(frozen=True)
class SparseCodebooks:
    """Codewords stored as sorted (index, value) lists, CSR style.

    Codeword ``w = j*h + c`` owns ``indices/values[indptr[w]:indptr[w+1]]``.
    """

    m: int
    h: int
    p: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dense(cls, codebooks, threshold: float = 0.0) -> "SparseCodebooks":
        C = np.asarray(codebooks, dtype=np.float64)
        m, h, p = C.shape
        flat = C.reshape(m * h, p)
        mask = np.abs(flat) > threshold
        rows, cols = np.nonzero(mask)
        indptr = np.zeros(m * h + 1, dtype=np.int64)
        np.cumsum(mask.sum(axis=1), out=indptr[1:])
        return cls(m, h, p, indptr, cols.astype(np.int64), flat[rows, cols])

    def to_dense(self) -> np.ndarray:
        flat = np.zeros((self.m * self.h, self.p))
        rows = np.repeat(np.arange(self.m * self.h), np.diff(self.indptr))
        flat[rows, self.indices] = self.values
        return flat.reshape(self.m, self.h, self.p)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])


def build_lut(z_q, codebooks) -> np.ndarray:
    """(m, h) table of inner products between the query and every codeword.

    Accumulates dimension by dimension in index order, the same order the
    sparse builder uses, so both produce bit-identical tables.
    """
    C = np.asarray(codebooks, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_q.shape != (C.shape[2],):
        raise ValueError(f"query has shape {z_q.shape}, codebooks expect ({C.shape[2]},)")
    lut = np.zeros(C.shape[:2])
    for t in range(C.shape[2]):
        lut += C[:, :, t] * z_q[t]
    return lut


def build_lut_sparse(z_q, sparse: SparseCodebooks) -> np.ndarray:
    """Same table as :func:`build_lut`, touching only the stored nonzeros."""
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_q.shape != (sparse.p,):
        raise ValueError(f"query has shape {z_q.shape}, codebooks expect ({sparse.p},)")
    lut = np.zeros(sparse.m * sparse.h)
    owner = np.repeat(np.arange(sparse.m * sparse.h), np.diff(sparse.indptr))
    np.add.at(lut, owner, sparse.values * z_q[sparse.indices])
    return lut.reshape(sparse.m, sparse.h)


def adc_score(code, lut) -> float:
    """Approximate inner product: ``sum_j lut[j, code[j]]``."""
    lut = np.asarray(lut)
    code = np.asarray(code, dtype=np.intp)
    total = 0.0
    for j in range(lut.shape[0]):
        total += lut[j, code[j]]
    return float(total)


def adc_scores(codes, lut) -> np.ndarray:
    """Scores of every row of an (n, m) code matrix, summed in codebook order."""
    codes = np.asarray(codes, dtype=np.intp)
    lut = np.asarray(lut)
    out = lut[0][codes[:, 0]].copy()
    for j in range(1, lut.shape[0]):
        out += lut[j][codes[:, j]]
    return out


def _select(ids: np.ndarray, scores: np.ndarray, k: int):
    """Top ``k`` by score descending, ties to the smaller id."""
    if ids.size > k:
        kth = np.partition(scores, ids.size - k)[ids.size - k]
        keep = scores >= kth
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def topk_from_lut(lut, codes, k: int, threads: int = 1):
    """Rank the database by ADC score; returns (ids, scores) of length ``min(k, n)``.

    The database is scanned in shards; each shard keeps its own top ``k``
    and the shard winners are merged.
    """
    codes = np.asarray(codes)
    n = codes.shape[0]
    if n == 0:
        raise ValueError("empty database")
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, n)

    def shard(lo: int):
        hi = min(lo + _SHARD, n)
        return _select(np.arange(lo, hi), adc_scores(codes[lo:hi], lut), k)

    starts = range(0, n, _SHARD)
    if threads > 1 and n > _SHARD:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(shard, starts))
    else:
        parts = [shard(lo) for lo in starts]
    ids = np.concatenate([p[0] for p in parts])
    scores = np.concatenate([p[1] for p in parts])
    return _select(ids, scores, k)


def topk(query_raw, embedder: EmbedderParams, codebooks, codes, k: int, sparse: SparseCodebooks | None = None,
         threads: int = 1) -> list[tuple[int, float]]:
    """Embed a raw query and return the ``k`` best (point id, score) pairs."""
    z_q = embed(embedder, query_raw)
    lut = build_lut_sparse(z_q, sparse) if sparse is not None else build_lut(z_q, codebooks)
    ids, scores = topk_from_lut(lut, codes, k, threads)
    return [(int(i), float(s)) for i, s in zip(ids, scores)]


def search_batch(queries_raw, embedder: EmbedderParams, codebooks, codes, k: int,
                 sparse: SparseCodebooks | None = None, threads: int = 1):
    """Run :func:`topk` for every query row; returns (ids, scores) arrays of shape (q, k)."""
    Zq = embed(embedder, np.atleast_2d(queries_raw))
    k = min(k, np.asarray(codes).shape[0])
    all_ids = np.empty((Zq.shape[0], k), dtype=np.int64)
    all_scores = np.empty((Zq.shape[0], k))
    for qi, z_q in enumerate(Zq):
        lut = build_lut_sparse(z_q, sparse) if sparse is not None else build_lut(z_q, codebooks)
        all_ids[qi], all_scores[qi] = topk_from_lut(lut, codes, k, threads)
    return all_ids, all_scores


RESULT_FIELDS = ("query_id", "rank", "point_id", "score", "distance")


def write_results_csv(path, ids: np.ndarray, scores: np.ndarray) -> None:
    """One row per (query, rank); distance is ``2 - 2*score``, rank starts at 1."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for q in range(ids.shape[0]):
            for r in range(ids.shape[1]):
                s = float(scores[q, r])
                w.writerow([q, r + 1, int(ids[q, r]), repr(s), repr(2.0 - 2.0 * s)])


def read_results_csv(path) -> list[np.ndarray]:
    """Ranked point ids per query, in query order."""
    rows: dict[int, list[tuple[int, int]]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(RESULT_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rows.setdefault(int(row["query_id"]), []).append((int(row["rank"]), int(row["point_id"])))
    if not rows:
        return []
    nq = max(rows) + 1
    return [np.array([pid for _, pid in sorted(rows.get(q, []))], dtype=np.int64) for q in range(nq)]
