"""Codebook updates for fixed codes.

With codes fixed, ``alpha*||Z - CB||^2 + gamma*||Phi - CB||^2`` equals
``(alpha+gamma)*||T - CB||^2`` plus a constant, where
``T = (alpha*Z + gamma*Phi)/(alpha+gamma)``. Both the dense and the sparse
update work on ``T`` and on the normal equations of the one-hot design,
which are accumulated by scattering over code indices; the (n, m*h)
one-hot matrix is never formed.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

NNZ_THRESHOLD = 1e-8


class SingularSystemError(np.linalg.LinAlgError):
    pass


class LassoConvergenceError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


def target_matrix(Z, Phi, alpha: float, gamma: float) -> np.ndarray:
    """``(alpha*Z + gamma*Phi)/(alpha+gamma)``; plain ``Z`` when both weights are zero."""
    Z = np.asarray(Z, dtype=np.float64)
    if alpha + gamma <= 0:
        return Z
    if not gamma:
        return Z.copy()
    return (alpha * Z + gamma * np.asarray(Phi, dtype=np.float64)) / (alpha + gamma)


def flat_indices(codes, h: int) -> np.ndarray:
    """Column index into the m*h one-hot layout for every (point, codebook)."""
    codes = np.asarray(codes, dtype=np.intp)
    return codes + h * np.arange(codes.shape[1])


def one_hot(codes, h: int) -> np.ndarray:
    """Explicit (n, m*h) 0/1 design matrix; only for small problems and checks."""
    idx = flat_indices(codes, h)
    A = np.zeros((idx.shape[0], idx.shape[1] * h))
    A[np.arange(idx.shape[0])[:, None], idx] = 1.0
    return A


def normal_equations(codes, T, h: int) -> tuple[np.ndarray, np.ndarray]:
    """``(A^T A, A^T T)`` for the one-hot design ``A`` of ``codes``."""
    idx = flat_indices(codes, h)
    n, m = idx.shape
    K = m * h
    pairs = (idx[:, :, None] * K + idx[:, None, :]).ravel()
    G = np.bincount(pairs, minlength=K * K).reshape(K, K).astype(np.float64)
    T = np.asarray(T, dtype=np.float64)
    R = np.zeros((K, T.shape[1]))
    for j in range(m):
        np.add.at(R, idx[:, j], T)
    return G, R


def codebook_objective(Z, Phi, codebooks, codes, alpha: float, gamma: float) -> float:
    """``alpha*||Z - CB||^2 + gamma*||Phi - CB||^2`` summed over all points."""
    from .encoder import reconstruct

    Rec = reconstruct(codebooks, codes)
    val = alpha * float(np.sum((np.asarray(Z) - Rec) ** 2))
    if gamma:
        val += gamma * float(np.sum((np.asarray(Phi) - Rec) ** 2))
    return val


def update_dense(Z, Phi, codes, alpha: float, gamma: float, h: int, ridge: float = 1e-6, previous=None) -> np.ndarray:
    """Closed-form least-squares codebooks for fixed codes.

    Solves ``min_C ||T - CB||^2 + ridge*||C - previous||^2``; the ridge
    anchor keeps codewords no point uses at their previous value (zero when
    ``previous`` is None) and makes the system positive definite. All p
    output dimensions share one factorization.

    Returns:
        (m, h, p) codebooks.
    """
    T = target_matrix(Z, Phi, alpha, gamma)
    codes = np.asarray(codes)
    m = codes.shape[1]
    p = T.shape[1]
    G, R = normal_equations(codes, T, h)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if ridge == 0:
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise SingularSystemError(
                "normal matrix B B^T is singular (unused codewords or m > 1 redundancy); use ridge > 0"
            )
    else:
        G = G + ridge * np.eye(G.shape[0])
        if previous is not None:
            R = R + ridge * np.asarray(previous, dtype=np.float64).reshape(m * h, p)
    X = scipy.linalg.solve(G, R, assume_a="pos")
    return X.reshape(m, h, p)


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def kkt_violation(G, R, X, l1_weight: float) -> float:
    """Largest violation of the optimality conditions of ``||y - Ax||^2 + w*||x||_1``.

    ``G = A^T A`` and ``R = A^T y``. Active coordinates need
    ``|(A^T(y - Ax))_j| = w/2`` with matching sign, inactive ones ``<= w/2``.
    """
    corr = R - G @ X
    half = l1_weight / 2.0
    active = np.abs(X) > 0
    v_active = np.abs(corr - half * np.sign(X))
    v_inactive = np.maximum(np.abs(corr) - half, 0.0)
    return float(np.max(np.where(active, v_active, v_inactive), initial=0.0))


def lasso_gram(G, R, l1_weight: float, tol: float = 1e-8, max_sweeps: int = 10000, init=None) -> np.ndarray:
    """Cyclic coordinate descent on ``||y - Ax||^2 + w*||x||_1`` given ``G = A^T A``, ``R = A^T y``.

    ``R`` may have several columns; they are independent problems sharing
    ``G`` and are swept together. Stops when no coefficient moves by ``tol``
    or more in a full sweep.
    """
    G = np.asarray(G, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    vec = R.ndim == 1
    R2 = R[:, None] if vec else R
    K = G.shape[0]
    X = np.zeros_like(R2) if init is None else np.array(init, dtype=np.float64).reshape(R2.shape)
    diag = np.diag(G).copy()
    dead = diag <= 0
    X[dead] = 0.0
    half = l1_weight / 2.0
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(K):
            if dead[j]:
                continue
            rho = R2[j] - G[j] @ X + diag[j] * X[j]
            new = _soft(rho, half) / diag[j]
            change = np.max(np.abs(new - X[j]))
            if change > biggest:
                biggest = change
            X[j] = new
        if biggest < tol:
            return X[:, 0] if vec else X
    raise LassoConvergenceError(
        f"coordinate descent did not converge in {max_sweeps} sweeps; "
        f"last max change {biggest:.3g}, KKT violation {kkt_violation(G, R2, X, l1_weight):.3g}"
    )


def lasso_solve(A, y, l1_weight: float, tol: float = 1e-8, max_sweeps: int = 10000, init=None) -> np.ndarray:
    """Minimize ``||y - A c||^2 + l1_weight*||c||_1`` by cyclic coordinate descent."""
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if l1_weight < 0:
        raise ValueError("l1_weight must be non-negative")
    return lasso_gram(A.T @ A, A.T @ y, l1_weight, tol, max_sweeps, init)


def _sparse_system(Z, Phi, codes, alpha, gamma, h):
    T = target_matrix(Z, Phi, alpha, gamma)
    G, R = normal_equations(codes, T, h)
    return G, R


def update_sparse(Z, Phi, codes, alpha: float, gamma: float, h: int, l1_weight: float,
                  tol: float = 1e-8, max_sweeps: int = 10000, init=None) -> np.ndarray:
    """Codebooks minimizing ``||T - CB||^2 + l1_weight*||C||_1``.

    Coordinate descent is warm-started from the dense least-squares solution
    (or ``init``), so ``l1_weight = 0`` returns the dense update.
    """
    if l1_weight < 0:
        raise ValueError("l1_weight must be non-negative")
    codes = np.asarray(codes)
    m = codes.shape[1]
    G, R = _sparse_system(Z, Phi, codes, alpha, gamma, h)
    return _sparse_from_system(G, R, m, h, l1_weight, tol, max_sweeps, init)


def _sparse_from_system(G, R, m, h, l1_weight, tol, max_sweeps, init):
    p = R.shape[1]
    if init is None:
        init = scipy.linalg.solve(G + 1e-6 * np.eye(G.shape[0]), R, assume_a="pos")
    X = lasso_gram(G, R, l1_weight, tol, max_sweeps, np.asarray(init).reshape(m * h, p))
    return X.reshape(m, h, p)


def nnz(codebooks, threshold: float = NNZ_THRESHOLD) -> int:
    return int(np.count_nonzero(np.abs(np.asarray(codebooks)) > threshold))


def calibrate_l1_weight(Z, Phi, codes, alpha: float, gamma: float, h: int, target_nnz: int,
                        tol: float = 1e-8, max_sweeps: int = 10000, max_iter: int = 60,
                        return_codebooks: bool = False):
    """Find an L1 weight whose sparse codebooks keep at most ``target_nnz`` nonzeros.

    Bisects between 0 and the weight at which every coefficient vanishes,
    stopping once the count lies in ``[0.9*target_nnz, target_nnz]``. The
    returned weight always satisfies the budget.
    """
    codes = np.asarray(codes)
    m = codes.shape[1]
    G, R = _sparse_system(Z, Phi, codes, alpha, gamma, h)
    p = R.shape[1]
    if not 0 < target_nnz <= m * h * p:
        raise ValueError(f"target_nnz must lie in (0, {m * h * p}]")

    def solve(w, init):
        return _sparse_from_system(G, R, m, h, w, tol, max_sweeps, init)

    C0 = solve(0.0, None)
    if nnz(C0) <= target_nnz:
        return (0.0, C0) if return_codebooks else 0.0
    lo, hi = 0.0, 2.0 * float(np.max(np.abs(R))) * (1 + 1e-9)
    C_hi = solve(hi, None)
    if nnz(C_hi) > target_nnz:
        raise CalibrationError(f"no bracket: nnz={nnz(C_hi)} > {target_nnz} at weight {hi:.6g} (lower bound {lo})")
    warm = C0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        C_mid = solve(mid, warm)
        k = nnz(C_mid)
        log.debug("l1 bisection: weight %.6g -> nnz %d", mid, k)
        if k <= target_nnz:
            hi, C_hi = mid, C_mid
            if k >= 0.9 * target_nnz:
                break
        else:
            lo, warm = mid, C_mid
    return (hi, C_hi) if return_codebooks else hi
