"""Retrieval metrics: AP@R, MAP@R, precision-recall points, quantization error."""

from __future__ import annotations

import csv
import json
import logging

import numpy as np

from .encoder import reconstruct

log = logging.getLogger(__name__)


def average_precision(ranked, relevant, R: int) -> float:
    """AP over the top ``R`` results, normalized by ``min(|relevant|, R)``.

    An empty relevant set scores 0.
    """
    if R < 1:
        raise ValueError("cutoff R must be at least 1")
    relevant = relevant if isinstance(relevant, (set, frozenset)) else set(np.asarray(relevant).tolist())
    if not relevant:
        log.info("average_precision: empty relevant set, AP defined as 0")
        return 0.0
    hits = 0
    total = 0.0
    for r, pid in enumerate(np.asarray(ranked)[:R].tolist(), 1):
        if pid in relevant:
            hits += 1
            total += hits / r
    return total / min(len(relevant), R)


def _relevance(query_labels, db_labels):
    """Boolean (q, n) relevance; 2-D label inputs are multi-hot indicator rows."""
    ql = np.asarray(query_labels)
    dl = np.asarray(db_labels)
    if ql.ndim == 2:
        return (ql.astype(bool).astype(np.int64) @ dl.astype(bool).astype(np.int64).T) > 0
    return ql[:, None] == dl[None, :]


def map_at(query_labels, db_labels, results, R: int) -> float:
    """Mean over queries of AP@R, with relevance meaning a shared label.

    Args:
        query_labels: (q,) class ids, or (q, l) multi-hot rows.
        db_labels: (n,) or (n, l), matching ``query_labels``.
        results: ranked database ids per query.
        R: cutoff.
    """
    aps = per_query_ap(query_labels, db_labels, results, R)
    # summed in query order so the value does not depend on numpy's reduction strategy
    return sum(float(a) for a in aps) / len(aps)


def per_query_ap(query_labels, db_labels, results, R: int) -> np.ndarray:
    rel = _relevance(query_labels, db_labels)
    if len(results) != rel.shape[0]:
        raise ValueError(f"{len(results)} result lists for {rel.shape[0]} queries")
    return np.array([average_precision(res, set(np.flatnonzero(rel[q]).tolist()), R) for q, res in enumerate(results)])


def precision_recall_points(ranked, relevant) -> list[tuple[float, float]]:
    """(recall, precision) after each rank position of ``ranked``."""
    relevant = relevant if isinstance(relevant, (set, frozenset)) else set(np.asarray(relevant).tolist())
    if not relevant:
        raise ValueError("precision-recall needs a nonempty relevant set")
    hits = np.cumsum([pid in relevant for pid in np.asarray(ranked).tolist()])
    ranks = np.arange(1, hits.size + 1)
    return list(zip((hits / len(relevant)).tolist(), (hits / ranks).tolist()))


def mean_pr_curve(query_labels, db_labels, results) -> np.ndarray:
    """Per-rank (recall, precision) averaged over queries; queries must share a result length."""
    rel = _relevance(query_labels, db_labels)
    pts = [precision_recall_points(res, set(np.flatnonzero(rel[q]).tolist())) for q, res in enumerate(results)]
    return np.mean(np.array(pts), axis=0)


def quantization_report(Z, codebooks, codes) -> dict:
    Rec = reconstruct(codebooks, codes)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != Rec.shape:
        raise ValueError(f"embeddings {Z.shape} and reconstructions {Rec.shape} disagree")
    return {
        "mse": float(np.mean(np.sum((Z - Rec) ** 2, axis=1))),
        "mean_reconstruction_norm": float(np.mean(np.linalg.norm(Rec, axis=1))),
    }


def write_metrics(csv_path, json_path, metrics: dict, R: int, bits: int | None) -> None:
    """Metrics as CSV rows (metric, value, R, bits) and the same data as a JSON summary."""
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value", "R", "bits"])
        for name, value in metrics.items():
            w.writerow([name, repr(float(value)), R, "" if bits is None else bits])
    summary = {"R": R, "bits": bits, "metrics": {k: float(v) for k, v in metrics.items()}}
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def write_pr_csv(path, curve: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "recall", "precision"])
        for r, (rec, prec) in enumerate(curve.tolist(), 1):
            w.writerow([r, repr(rec), repr(prec)])
