"""Seeded synthetic image corpora: piecewise-constant shapes plus oriented edges."""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError


def synthetic_image(rng: np.random.Generator, shape=(100, 100), n_shapes: int = 6,
                    n_edges: int = 3, noise: float = 0.0) -> np.ndarray:
    """One image with values in [0, 1]."""
    H, W = shape
    ii, jj = np.mgrid[:H, :W].astype(float)
    x = np.full(shape, rng.uniform(0.0, 0.3))
    for _ in range(n_edges):
        # half-plane step through a random point at a random orientation
        t = rng.uniform(0, np.pi)
        c = rng.uniform(0, H), rng.uniform(0, W)
        side = (ii - c[0]) * np.cos(t) + (jj - c[1]) * np.sin(t) > 0
        x[side] += rng.uniform(-0.2, 0.2)
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(0.05, 0.2) * min(H, W)
        v = rng.uniform(0.1, 0.5)
        if rng.random() < 0.5:
            m = (ii - cy) ** 2 + (jj - cx) ** 2 < r * r
        else:
            m = (np.abs(ii - cy) < r) & (np.abs(jj - cx) < rng.uniform(0.5, 1.5) * r)
        x[m] = v
    if noise:
        x = x + noise * rng.standard_normal(shape)
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def synthetic_corpus(L: int = 10, shape=(100, 100), seed: int = 0, noise: float = 0.0,
                     n_shapes: int = 6, n_edges: int = 3) -> list[np.ndarray]:
    """``L`` images drawn from one seeded generator; identical seeds give identical corpora."""
    if L < 1:
        raise InvalidParameterError("L must be positive")
    if noise < 0:
        raise InvalidParameterError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, tuple(shape), n_shapes, n_edges, noise) for _ in range(L)]
