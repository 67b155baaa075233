"""Code assignment by iterated conditional modes inside stochastic local search.

For a point ``z`` with class center ``phi`` the code ``b`` minimizes::

    alpha*||z - C b||^2 + gamma*||phi - C b||^2

Writing ``u = alpha*z + gamma*phi`` and ``s = alpha + gamma`` this expands into
unary terms ``s*||c_t||^2 - 2<u, c_t>`` and pairwise terms ``2s<c_t, c_j>``.
The pairwise table depends only on the codebooks and is shared by all
points, so one ICM update of subcode ``t`` costs O(m*h) lookups.

All per-point arithmetic is done row by row in a fixed order, so encoding a
point alone or inside any batch, on any number of threads, gives the same
code bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

_CHUNK = 1024


def reconstruct(codebooks, codes) -> np.ndarray:
    """Sum of the selected codewords: (n, m) codes -> (n, p); (m,) -> (p,)."""
    C = np.asarray(codebooks, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.intp)
    single = codes.ndim == 1
    codes = np.atleast_2d(codes)
    m = C.shape[0]
    if codes.shape[1] != m:
        raise ValueError(f"codes have {codes.shape[1]} subindices but there are {m} codebooks")
    if codes.size and (codes.min() < 0 or codes.max() >= C.shape[1]):
        raise ValueError(f"subindex out of range [0, {C.shape[1]})")
    out = C[0][codes[:, 0]].copy()
    for j in range(1, m):
        out += C[j][codes[:, j]]
    return out[0] if single else out


def subproblem_objective(z, center, codebooks, code, alpha: float, gamma: float) -> float:
    """``alpha*||z - r||^2 + gamma*||center - r||^2`` with ``r`` the reconstruction of ``code``."""
    r = reconstruct(codebooks, code)
    val = alpha * float(np.sum((np.asarray(z) - r) ** 2))
    if gamma:
        val += gamma * float(np.sum((np.asarray(center) - r) ** 2))
    return val


@dataclass
class _Tables:
    unary: np.ndarray  # (n, m, h)
    const: np.ndarray  # (n,)
    pair_t: np.ndarray  # (m, m, h, h); pair_t[t, j][c_j, c_t] = 2s<C_t[c_t], C_j[c_j]>


def _pair_table(C: np.ndarray, s: float) -> np.ndarray:
    m, h, p = C.shape
    flat = C.reshape(m * h, p)
    gram = (flat @ flat.T).reshape(m, h, m, h)
    # gram[t, c_t, j, c_j] -> pair_t[t, j, c_j, c_t]: a row gather by c_j yields costs over c_t
    return 2.0 * s * np.ascontiguousarray(gram.transpose(0, 2, 3, 1))


def _tables(Z, Phi, C, alpha, gamma, pair_t=None) -> _Tables:
    s = alpha + gamma
    if s <= 0:
        raise ValueError("alpha + gamma must be positive to encode")
    m, h, p = C.shape
    flat = C.reshape(m * h, p)
    sq = np.sum(C * C, axis=2)
    n = Z.shape[0]
    unary = np.empty((n, m, h))
    const = np.empty(n)
    for i in range(n):
        u = alpha * Z[i]
        const[i] = alpha * float(Z[i] @ Z[i])
        if gamma:
            u = u + gamma * Phi[i]
            const[i] += gamma * float(Phi[i] @ Phi[i])
        unary[i] = s * sq - 2.0 * (flat @ u).reshape(m, h)
    if pair_t is None:
        pair_t = _pair_table(C, s)
    return _Tables(unary, const, pair_t)


def _objective(tab: _Tables, codes: np.ndarray) -> np.ndarray:
    n, m = codes.shape
    rows = np.arange(n)
    obj = tab.const.copy()
    for t in range(m):
        obj += tab.unary[rows, t, codes[:, t]]
    for t in range(m):
        for j in range(t + 1, m):
            obj += tab.pair_t[t, j][codes[:, j], codes[:, t]]
    return obj


def _icm_sweep(tab: _Tables, codes: np.ndarray) -> None:
    """One ICM pass over t = 0..m-1, in place; argmin ties go to the lowest index."""
    m = codes.shape[1]
    for t in range(m):
        cost = tab.unary[:, t, :].copy()
        for j in range(m):
            if j != t:
                cost += tab.pair_t[t, j][codes[:, j]]
        codes[:, t] = np.argmin(cost, axis=1)


def _greedy_init(tab: _Tables) -> np.ndarray:
    """Pick codebooks in order, each one fitting the residual left by the previous ones."""
    n, m, h = tab.unary.shape
    codes = np.zeros((n, m), dtype=np.intp)
    for t in range(m):
        cost = tab.unary[:, t, :].copy()
        for j in range(t):
            cost += tab.pair_t[t, j][codes[:, j]]
        codes[:, t] = np.argmin(cost, axis=1)
    return codes


def _draw_perturbations(seed, rounds: int, m: int, h: int, k: int):
    rng = np.random.default_rng(seed)
    if rounds <= 1 or k == 0:
        return np.zeros((max(rounds - 1, 0), k), np.intp), np.zeros((max(rounds - 1, 0), k), np.intp)
    pos = np.argsort(rng.random((rounds - 1, m)), axis=1, kind="stable")[:, :k]
    vals = rng.integers(0, h, size=(rounds - 1, k))
    return pos, vals


def _sls(tab: _Tables, init: np.ndarray, pos: np.ndarray, vals: np.ndarray, rounds: int, icm_iters: int):
    """Vectorized SLS over a block of points.

    ``pos``/``vals`` are (n, rounds-1, k). Round 0 runs ICM from ``init``;
    each later round perturbs the previous local optimum and runs ICM again.
    Returns best codes, best objectives and the (n, rounds) best-so-far trace.
    """
    n = init.shape[0]
    rows = np.arange(n)[:, None]
    cur = init.astype(np.intp, copy=True)
    best = best_obj = None
    trace = np.empty((n, rounds))
    for r in range(rounds):
        if r > 0 and pos.shape[-1]:
            cur[rows, pos[:, r - 1]] = vals[:, r - 1]
        for _ in range(icm_iters):
            _icm_sweep(tab, cur)
        obj = _objective(tab, cur)
        if best is None:
            best, best_obj = cur.copy(), obj
        else:
            better = obj < best_obj
            best[better] = cur[better]
            best_obj = np.where(better, obj, best_obj)
        trace[:, r] = best_obj
    return best, best_obj, trace


def _prepare(z, center, codebooks, gamma):
    C = np.asarray(codebooks, dtype=np.float64)
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    Phi = np.atleast_2d(np.asarray(center, dtype=np.float64)) if gamma else None
    return Z, Phi, C


def _check_code(code, C) -> np.ndarray:
    code = np.atleast_2d(np.asarray(code, dtype=np.intp))
    m, h, _ = C.shape
    if code.shape[1] != m or code.min() < 0 or code.max() >= h:
        raise ValueError(f"code must hold {m} subindices in [0, {h})")
    return code


def icm_pass(z, center, codebooks, code, alpha: float, gamma: float) -> np.ndarray:
    """One exhaustive coordinate sweep over the m subindices of a single point."""
    Z, Phi, C = _prepare(z, center, codebooks, gamma)
    codes = _check_code(code, C).copy()
    _icm_sweep(_tables(Z, Phi, C, alpha, gamma), codes)
    return codes[0].astype(np.uint8)


@dataclass
class SLSResult:
    code: np.ndarray
    objective: float
    best_trace: np.ndarray


def sls_search(z, center, codebooks, alpha, gamma, rounds, icm_iters, k, rng_seed, init_code=None) -> SLSResult:
    Z, Phi, C = _prepare(z, center, codebooks, gamma)
    m, h, _ = C.shape
    if rounds < 1 or not 0 <= k <= m:
        raise ValueError(f"need rounds >= 1 and 0 <= k <= m, got rounds={rounds}, k={k}")
    tab = _tables(Z, Phi, C, alpha, gamma)
    init = _greedy_init(tab) if init_code is None else _check_code(init_code, C)
    pos, vals = _draw_perturbations(rng_seed, rounds, m, h, k)
    best, obj, trace = _sls(tab, init, pos[None], vals[None], rounds, icm_iters)
    return SLSResult(best[0].astype(np.uint8), float(obj[0]), trace[0])


def sls_encode(z, center, codebooks, alpha, gamma, rounds, icm_iters, k, rng_seed, init_code=None) -> np.ndarray:
    """Encode one point with stochastic local search.

    Round 0 runs ``icm_iters`` ICM sweeps from ``init_code`` (greedy residual
    fit when omitted). Every later round resets ``k`` distinct random
    subindices of the previous local optimum to random codewords and runs
    ICM again. The best code seen in any round is returned.
    """
    return sls_search(z, center, codebooks, alpha, gamma, rounds, icm_iters, k, rng_seed, init_code).code


def point_seed(master: int, i: int) -> list[int]:
    """Seed of point ``i`` for a batch encoded with ``master``."""
    return [int(master), int(i)]


def encode_batch(Z, centers, codebooks, hp, seed: int = 0, init_codes=None, threads: int = 1) -> np.ndarray:
    """Encode every row of ``Z``; equal to per-row :func:`sls_encode` with ``point_seed(seed, i)``.

    Args:
        Z: (n, p) unit embeddings.
        centers: (n, p) per-point class centers, or None when ``hp.gamma == 0``.
        codebooks: (m, h, p) codewords.
        hp: supplies alpha, gamma, k_perturb, sls_rounds and icm_iters.
        seed: master seed; point ``i`` uses ``point_seed(seed, i)``.
        init_codes: optional (n, m) starting codes; greedy warm start otherwise.
        threads: worker threads over row chunks.

    Returns:
        (n, m) uint8 codes.
    """
    C = np.asarray(codebooks, dtype=np.float64)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    m, h, _ = C.shape
    n = Z.shape[0]
    gamma = hp.gamma
    if gamma and centers is None:
        raise ValueError("gamma > 0 requires per-point centers (use cross-domain mode to drop them)")
    Phi = np.atleast_2d(np.asarray(centers, dtype=np.float64)) if gamma else None
    k = min(hp.k_perturb, m)
    rounds, iters = hp.sls_rounds, hp.icm_iters
    if init_codes is not None:
        init_codes = _check_code(init_codes, C)
        if init_codes.shape[0] != n:
            raise ValueError(f"init_codes has {init_codes.shape[0]} rows, expected {n}")
    pair_t = _pair_table(C, hp.alpha + gamma) if hp.alpha + gamma > 0 else None
    out = np.empty((n, m), dtype=np.uint8)

    def run(lo: int) -> None:
        hi = min(lo + _CHUNK, n)
        tab = _tables(Z[lo:hi], Phi[lo:hi] if gamma else None, C, hp.alpha, gamma, pair_t)
        init = _greedy_init(tab) if init_codes is None else init_codes[lo:hi]
        draws = [_draw_perturbations(point_seed(seed, i), rounds, m, h, k) for i in range(lo, hi)]
        pos = np.stack([d[0] for d in draws])
        vals = np.stack([d[1] for d in draws])
        best, _, _ = _sls(tab, init, pos, vals, rounds, iters)
        out[lo:hi] = best

    starts = range(0, n, _CHUNK)
    if threads > 1 and n > _CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return out
