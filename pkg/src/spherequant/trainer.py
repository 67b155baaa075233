"""Alternating optimization of embedder, centers, codebooks and codes."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codebooks import calibrate_l1_weight, codebook_objective, update_dense
from .config import HyperParams
from .embedder import (
    DivergenceError,
    EmbedderParams,
    SGDState,
    embed,
    init_centers,
    init_params,
    loss_and_grad,
    loss_terms,
    sgd_step,
    update_centers,
)
from .encoder import encode_batch, reconstruct

log = logging.getLogger(__name__)


@dataclass
class RoundRecord:
    round: int
    softmax: float
    quantization: float
    center: float
    discriminative: float
    total: float
    # alpha*L_Q + gamma*L_D (per-point mean) around the codebook and encoding blocks
    quant_before: float = float("nan")
    quant_after_codebooks: float = float("nan")
    quant_after_encoding: float = float("nan")
    l1_weight: float = float("nan")


@dataclass
class FitResult:
    params: EmbedderParams
    centers: np.ndarray
    codebooks: np.ndarray | None
    codes: np.ndarray | None
    trace: list[RoundRecord] = field(default_factory=list)


def encoding_seed(seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed, round_index]).generate_state(1)[0])


def _batches(rng: np.random.Generator, n: int, size: int):
    perm = rng.permutation(n)
    for lo in range(0, n, size):
        yield perm[lo:lo + size]


def _check_finite(value: float, what: str, round_index: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"round {round_index}: {what} is not finite ({value})")


def fit(X, y, hp: HyperParams, rounds: int, seed: int = 0, rel_tol: float | None = None,
        threads: int = 1) -> FitResult:
    """Train the embedder and quantizer by block-coordinate descent.

    Each round runs SGD epochs on the embedder, a pass of mini-batch center
    updates, one codebook update (sparse when ``hp.sparsity_eps`` is set) and
    a re-encoding seeded with the current codes. With ``alpha == gamma == 0``
    the quantizer is never built and ``codebooks``/``codes`` are None.

    Args:
        X: (n, d) raw features.
        y: (n,) labels covering 0..l-1.
        hp: hyperparameters.
        rounds: alternation rounds; 0 returns the initial state.
        seed: seeds initialization, batch order and encoding.
        rel_tol: stop early once the total loss improves by less than this
            relative amount between rounds.
        threads: encoder worker threads.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if y.shape != (n,):
        raise ValueError(f"{y.shape[0]} labels for {n} feature rows")
    l = int(y.max()) + 1
    rng = np.random.default_rng(seed)
    quant = hp.alpha + hp.gamma > 0

    params = init_params(d, hp.p, l, rng)
    Z = embed(params, X)
    centers = init_centers(Z, y, l)
    C = codes = None
    if quant:
        random_codes = rng.integers(0, hp.h, size=(n, hp.m))
        C = update_dense(Z, centers[y], random_codes, hp.alpha, hp.gamma, hp.h, hp.ridge)
        codes = encode_batch(Z, centers[y], C, hp, seed=encoding_seed(seed, 0), threads=threads)

    result = FitResult(params, centers, C, codes)
    prev_total = None
    bs = hp.sgd.batch_size
    for r in range(1, rounds + 1):
        # (1) embedder
        state = SGDState.zeros_like(params)
        for _ in range(hp.sgd.epochs_per_round):
            for idx in _batches(rng, n, bs):
                loss, grad = loss_and_grad(params, X[idx], y[idx], centers, C, None if codes is None else codes[idx], hp)
                _check_finite(loss, "mini-batch loss", r)
                try:
                    params = sgd_step(params, grad, hp.sgd, state)
                except DivergenceError as exc:
                    raise DivergenceError(f"round {r}: {exc}") from None

        # (2) centers
        Z = embed(params, X)
        Rec = reconstruct(C, codes) if quant else None
        for idx in _batches(rng, n, bs):
            centers = update_centers(centers, Z[idx], None if Rec is None else Rec[idx], y[idx], hp.lam, hp.gamma, hp.zeta)

        rec = {}
        if quant:
            Phi = centers[y]
            obj = lambda C_, b_: codebook_objective(Z, Phi, C_, b_, hp.alpha, hp.gamma) / n  # noqa: E731
            rec["quant_before"] = obj(C, codes)
            # (3) codebooks
            if hp.sparsity_eps is not None:
                w, C = calibrate_l1_weight(Z, Phi, codes, hp.alpha, hp.gamma, hp.h, hp.sparsity_eps,
                                           return_codebooks=True)
                rec["l1_weight"] = w
            else:
                C = update_dense(Z, Phi, codes, hp.alpha, hp.gamma, hp.h, hp.ridge, previous=C)
            rec["quant_after_codebooks"] = obj(C, codes)
            # (4) codes
            codes = encode_batch(Z, Phi, C, hp, seed=encoding_seed(seed, r), init_codes=codes, threads=threads)
            rec["quant_after_encoding"] = obj(C, codes)

        terms = loss_terms(params, X, y, centers, C, codes, hp)
        _check_finite(terms.total, "total loss", r)
        record = RoundRecord(r, terms.softmax, terms.quantization, terms.center, terms.discriminative, terms.total, **rec)
        log.info("round %d: total %.6f (softmax %.4f, L_Q %.4f, L_C %.4f, L_D %.4f)", r, terms.total,
                 terms.softmax, terms.quantization, terms.center, terms.discriminative)
        result = FitResult(params, centers, C, codes, result.trace + [record])
        if rel_tol is not None and prev_total is not None:
            if (prev_total - terms.total) < rel_tol * abs(prev_total):
                log.info("round %d: relative improvement below %g, stopping", r, rel_tol)
                break
        prev_total = terms.total
    return result


def encode_database(X, params: EmbedderParams, codebooks, hp: HyperParams, centers=None, labels=None,
                    cross_domain: bool = False, seed: int = 0, threads: int = 1) -> np.ndarray:
    """Embed raw features and encode them.

    In cross-domain mode the center term is dropped (gamma = 0), so the
    points need no labels and may come from classes never seen in training.
    """
    Z = embed(params, np.asarray(X, dtype=np.float64))
    if cross_domain:
        return encode_batch(Z, None, codebooks, replace(hp, gamma=0.0), seed=seed, threads=threads)
    if centers is None or labels is None:
        raise ValueError("encoding without --cross-domain needs labels and trained centers")
    labels = np.asarray(labels, dtype=np.int64)
    centers = np.asarray(centers)
    if labels.shape != (Z.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {Z.shape[0]} feature rows")
    if labels.max() >= centers.shape[0]:
        raise ValueError(f"label {labels.max()} has no trained center ({centers.shape[0]} classes)")
    return encode_batch(Z, centers[labels], codebooks, hp, seed=seed, threads=threads)


TRACE_TERMS = ("softmax", "quantization", "center", "discriminative", "total",
               "quant_before", "quant_after_codebooks", "quant_after_encoding", "l1_weight")


def write_trace_csv(path, trace: list[RoundRecord]) -> None:
    """Long format: one (round, term, value) row per recorded quantity."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["round", "term", "value"])
        for rec in trace:
            row = asdict(rec)
            for term in TRACE_TERMS:
                w.writerow([rec.round, term, repr(float(row[term]))])
