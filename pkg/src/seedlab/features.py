"""Fixed random-projection feature space.

A seed-pinned Gaussian projection with unit-norm rows stands in for a
pretrained image-feature extractor: cosine similarity in this space is the
project's "perceptual" similarity, and instruction directions live here.
The seed is a frozen project constant; changing it invalidates every cached
direction and stored report.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

FEATURE_SEED = 730911
FEATURE_ROWS = 64


class FeatureMap:
    """Projection of sample vectors into the fixed 64-row feature space."""

    def __init__(self, dim: int, rows: int = FEATURE_ROWS, seed: int = FEATURE_SEED):
        self.dim = dim
        self.rows = rows
        bg = np.random.Philox(key=[seed, dim])
        m = np.random.Generator(bg).normal(size=(rows, dim))
        self.matrix = m / np.linalg.norm(m, axis=1, keepdims=True)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Project (dim,) or (batch, dim) onto the feature rows."""
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def project_blocks(self, x: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Projection restricted to a column subset (block-limited features)."""
        return np.asarray(x, dtype=np.float64)[..., cols] @ self.matrix[:, cols].T


@lru_cache(maxsize=None)
def feature_map(dim: int) -> FeatureMap:
    return FeatureMap(dim)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
