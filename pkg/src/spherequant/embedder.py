"""Linear projection onto the unit sphere with a softmax head.

The embedding is ``z = Wx / ||Wx||``. Training minimizes, per mini-batch
(all terms averaged over the batch)::

    softmax(z, y) + alpha*||z - Cb||^2 + lam*||z - phi_y||^2 + gamma*||phi_y - Cb||^2

The last term does not depend on the embedder parameters; it is reported in
the total but contributes no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HyperParams, SGDSettings
from .encoder import reconstruct


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass(frozen=True)
class EmbedderParams:
    W: np.ndarray  # (p, d)
    W_cls: np.ndarray  # (l, p)
    b_cls: np.ndarray  # (l,)

    def __post_init__(self):
        p, d = self.W.shape
        l, p2 = self.W_cls.shape
        if p2 != p or self.b_cls.shape != (l,):
            raise ValueError(f"inconsistent shapes W{self.W.shape}, W_cls{self.W_cls.shape}, b_cls{self.b_cls.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, p, l)."""
        return self.W.shape[1], self.W.shape[0], self.W_cls.shape[0]

    def _arrays(self):
        return (self.W, self.W_cls, self.b_cls)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self._arrays())


def init_params(d: int, p: int, l: int, rng: np.random.Generator) -> EmbedderParams:
    W = rng.standard_normal((p, d)) / np.sqrt(d)
    W_cls = 0.01 * rng.standard_normal((l, p))
    return EmbedderParams(W, W_cls, np.zeros(l))


def _project(params: EmbedderParams, X: np.ndarray):
    V = X @ params.W.T
    norms = np.linalg.norm(V, axis=1)
    bad = np.flatnonzero(~(norms > 1e-12))
    if bad.size:
        raise ValueError(f"row {bad[0]}: projection has near-zero norm, direction undefined")
    return V, norms


def embed(params: EmbedderParams, x) -> np.ndarray:
    """Map raw features (a vector or an (n, d) batch) to unit vectors."""
    x = np.asarray(x, dtype=np.float64)
    V, norms = _project(params, np.atleast_2d(x))
    Z = V / norms[:, None]
    return Z[0] if x.ndim == 1 else Z


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def softmax_loss(params: EmbedderParams, z, y) -> float | np.ndarray:
    """Cross-entropy of the softmax head; per row when ``z`` is a batch."""
    z = np.asarray(z, dtype=np.float64)
    logits = np.atleast_2d(z) @ params.W_cls.T + params.b_cls
    y = np.atleast_1d(y)
    if np.any(y >= logits.shape[1]) or np.any(y < 0):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    loss = -_log_softmax(logits)[np.arange(len(y)), y]
    return float(loss[0]) if z.ndim == 1 else loss


def center_loss(z, center) -> float | np.ndarray:
    diff = np.asarray(z, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return np.sum(diff * diff, axis=-1)


@dataclass(frozen=True)
class LossTerms:
    softmax: float
    quantization: float
    center: float
    discriminative: float
    total: float


def loss_terms(params, X, y, centers, codebooks, codes, hp: HyperParams) -> LossTerms:
    """Batch-mean value of every loss term and the weighted total."""
    Z = embed(params, X)
    return _terms_from_embeddings(params, Z, y, centers, codebooks, codes, hp)


def _terms_from_embeddings(params, Z, y, centers, codebooks, codes, hp) -> LossTerms:
    y = np.asarray(y)
    sm = float(np.mean(softmax_loss(params, Z, y)))
    phi = np.asarray(centers)[y] if centers is not None else None
    lc = float(np.mean(center_loss(Z, phi))) if phi is not None else 0.0
    if codebooks is not None and codes is not None:
        R = reconstruct(codebooks, codes)
        lq = float(np.mean(center_loss(Z, R)))
        ld = float(np.mean(center_loss(phi, R))) if phi is not None else 0.0
    else:
        lq = ld = 0.0
    total = sm + hp.alpha * lq + hp.lam * lc + hp.gamma * ld
    return LossTerms(sm, lq, lc, ld, total)


def loss_and_grad(params: EmbedderParams, X, y, centers, codebooks, codes, hp: HyperParams):
    """Total loss over a mini-batch and its gradient with respect to the embedder.

    Args:
        params: current embedder.
        X: (b, d) raw features.
        y: (b,) labels.
        centers: (l, p) class centers, held fixed.
        codebooks: (m, h, p) codewords, held fixed; may be None when alpha == gamma == 0.
        codes: (b, m) current codes of the batch points.
        hp: loss weights.

    Returns:
        ``(total, grad)`` with ``grad`` an :class:`EmbedderParams` of gradients.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    b = X.shape[0]
    centers = np.asarray(centers, dtype=np.float64)
    need_quant = hp.alpha > 0 or hp.gamma > 0
    if need_quant:
        codebooks = np.asarray(codebooks, dtype=np.float64)
        codes = np.asarray(codes)
        if codes.shape != (b, codebooks.shape[0]):
            raise ValueError(f"codes shape {codes.shape} does not match batch of {b} with m={codebooks.shape[0]}")

    V, norms = _project(params, X)
    Z = V / norms[:, None]
    phi = centers[y]

    logits = Z @ params.W_cls.T + params.b_cls
    logp = _log_softmax(logits)
    sm = -logp[np.arange(b), y]
    dlogits = np.exp(logp)
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    dZ = dlogits @ params.W_cls
    lc = center_loss(Z, phi)
    dZ += (2.0 * hp.lam / b) * (Z - phi)
    lq = ld = np.zeros(b)
    if need_quant:
        R = reconstruct(codebooks, codes)
        lq = center_loss(Z, R)
        ld = center_loss(phi, R)
        dZ += (2.0 * hp.alpha / b) * (Z - R)

    # Jacobian of v -> v/||v|| is (I - z z^T)/||v||.
    dV = (dZ - Z * np.sum(dZ * Z, axis=1, keepdims=True)) / norms[:, None]
    grad = EmbedderParams(dV.T @ X, dlogits.T @ Z, dlogits.sum(axis=0))

    total = float(np.mean(sm) + hp.alpha * np.mean(lq) + hp.lam * np.mean(lc) + hp.gamma * np.mean(ld))
    return total, grad


@dataclass
class SGDState:
    velocity: EmbedderParams

    @classmethod
    def zeros_like(cls, params: EmbedderParams) -> "SGDState":
        return cls(EmbedderParams(*(np.zeros_like(a) for a in params._arrays())))


def sgd_step(params: EmbedderParams, grad: EmbedderParams, sgd: SGDSettings, state: SGDState) -> EmbedderParams:
    """One momentum SGD step with weight decay; the classifier head uses a boosted rate.

    Updates ``state.velocity`` in place and returns the new parameters.
    """
    if not grad.all_finite():
        raise DivergenceError("non-finite gradient")
    lrs = (sgd.learning_rate, sgd.learning_rate * sgd.head_lr_mult, sgd.learning_rate * sgd.head_lr_mult)
    new_v, new_p = [], []
    for theta, g, v, lr in zip(params._arrays(), grad._arrays(), state.velocity._arrays(), lrs):
        v = sgd.momentum * v - lr * (g + sgd.weight_decay * theta)
        new_v.append(v)
        new_p.append(theta + v)
    out = EmbedderParams(*new_p)
    if not out.all_finite():
        raise DivergenceError("parameters became non-finite")
    state.velocity = EmbedderParams(*new_v)
    return out


def init_centers(Z: np.ndarray, y: np.ndarray, num_classes: int) -> np.ndarray:
    """Class means of the given embeddings; every class must be present."""
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0)
        raise ValueError(f"classes {missing.tolist()} have no training points")
    sums = np.zeros((num_classes, Z.shape[1]))
    np.add.at(sums, y, Z)
    return sums / counts[:, None]


def update_centers(centers, Z, R, y, lam: float, gamma: float, zeta: float) -> np.ndarray:
    """Mini-batch center step.

    ``delta_j = sum_{i: y_i=j} [lam*(phi_j - z_i) + gamma*(phi_j - r_i)] / (1 + n_j)``
    and ``phi_j <- phi_j - zeta*delta_j``. Classes absent from the batch keep
    their centers. ``R`` holds the reconstructions of the batch points and
    may be None when ``gamma == 0``.
    """
    centers = np.asarray(centers, dtype=np.float64)
    y = np.asarray(y)
    Z = np.asarray(Z, dtype=np.float64)
    l = centers.shape[0]
    phi = centers[y]
    per_point = lam * (phi - Z)
    if gamma:
        per_point = per_point + gamma * (phi - np.asarray(R, dtype=np.float64))
    num = np.zeros_like(centers)
    np.add.at(num, y, per_point)
    counts = np.bincount(y, minlength=l)
    return centers - zeta * num / (1.0 + counts)[:, None]
