"""Synthetic labelled features: noisy points around random unit class directions."""

from __future__ import annotations

import numpy as np


def class_directions(classes: int, d: int, rng: np.random.Generator) -> np.ndarray:
    D = rng.standard_normal((classes, d))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def make_features(n: int, classes: int, d: int, noise: float, seed: int, n_queries: int = 0):
    """Draw ``n`` database points and ``n_queries`` query points from the same classes.

    Labels are uniform over classes; a point is its class direction plus
    isotropic Gaussian noise with standard deviation ``noise`` per coordinate.

    Returns:
        ``(X, y)`` or, when ``n_queries > 0``, ``(X, y, Xq, yq)``.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 1 or d < 1 or noise < 0:
        raise ValueError("need n >= 1, d >= 1 and noise >= 0")
    rng = np.random.default_rng(seed)
    dirs = class_directions(classes, d, rng)

    def draw(count):
        y = rng.integers(0, classes, size=count)
        X = dirs[y] + noise * rng.standard_normal((count, d))
        return X, y

    X, y = draw(n)
    if n_queries <= 0:
        return X, y
    Xq, yq = draw(n_queries)
    return X, y, Xq, yq
