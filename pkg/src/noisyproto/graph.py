"""Per-class affinity graph and its symmetric normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GraphError, ParameterError
from .numerics import l2_normalize_columns

DEFAULT_K_NEIGHBORS = 10


@dataclass(frozen=True)
class AffinityGraph:
    adjacency: np.ndarray
    normalized: bool = False

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]


def _features(x) -> np.ndarray:
    return np.asarray(getattr(x, "V", x), dtype=np.float64)


def build_affinity(features, k_neighbors: int = DEFAULT_K_NEIGHBORS) -> AffinityGraph:
    """Mutual-kNN graph of clamped cosine similarities, self-loops of weight 1.

    ``features`` is a FeatureSet or a ``d x N`` matrix.
    """
    V = _features(features)
    n = V.shape[1]
    if n < 2:
        raise ParameterError("graph needs at least two examples")
    if not 1 <= k_neighbors < n:
        raise ParameterError(f"k_neighbors={k_neighbors} must lie in [1, N={n})")
    U = l2_normalize_columns(V)
    sim = np.maximum(U.T @ U, 0.0)
    ranked = sim.copy()
    np.fill_diagonal(ranked, -np.inf)
    # stable sort: equal similarities resolve to the lower index
    order = np.argsort(-ranked, axis=1, kind="stable")[:, :k_neighbors]
    knn = np.zeros((n, n), dtype=bool)
    knn[np.arange(n)[:, None], order] = True
    mutual = knn & knn.T
    A = np.where(mutual, sim, 0.0)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1.0)
    return AffinityGraph(A, normalized=False)


def normalize_adjacency(g: AffinityGraph) -> AffinityGraph:
    if g.normalized:
        raise ContractError("graph is already normalized")
    A = g.adjacency
    if not np.allclose(A, A.T, atol=1e-12, rtol=0.0):
        raise GraphError("adjacency is not symmetric")
    deg = A.sum(axis=1)
    if np.any(deg <= 0):
        raise GraphError(f"zero degree at node {int(np.argmax(deg <= 0))}")
    inv = 1.0 / np.sqrt(deg)
    An = inv[:, None] * A * inv[None, :]
    return AffinityGraph(0.5 * (An + An.T), normalized=True)


def class_graph(features, k_neighbors: int = DEFAULT_K_NEIGHBORS) -> AffinityGraph:
    """Normalized graph for one class; ``k_neighbors`` is capped at N-1."""
    n = _features(features).shape[1]
    return normalize_adjacency(build_affinity(features, min(k_neighbors, n - 1)))
