"""Clean, global-noise, windowed and clustered prototypes of one class.

Clean examples always carry weight 1, so the shared normalizer is
``k + sum(noisy r)``.  Window and cluster prototypes are unnormalized
relevance-weighted sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import FeatureSet, RelevanceScores
from .errors import ParameterError
from .numerics import make_rng

DEGENERATE_SPREAD = 1e-8


@dataclass(frozen=True)
class WindowSpec:
    T: int
    r_min: float
    r_max: float

    @property
    def width(self) -> float:
        return (self.r_max - self.r_min) / self.T

    @property
    def degenerate(self) -> bool:
        return self.r_max - self.r_min < DEGENERATE_SPREAD

    def bounds(self) -> list[tuple[float, float]]:
        """Half-open ``[lo, hi)`` per window; the last one is closed at ``r_max``."""
        edges = [self.r_min + self.width * t for t in range(self.T)] + [self.r_max]
        return list(zip(edges[:-1], edges[1:]))


@dataclass
class HybridPrototypes:
    p_clean: np.ndarray
    p_noise_global: np.ndarray
    window_protos: np.ndarray  # d x T, unnormalized
    window_empty: np.ndarray  # bool, length T
    window_assignment: np.ndarray  # per noisy example
    p_unified: np.ndarray
    normalizer: float


def _noisy_scores(r, features: FeatureSet | None = None) -> np.ndarray:
    """Noisy part of ``r``: RelevanceScores, a length-N vector, or an already noisy-only vector."""
    if isinstance(r, RelevanceScores):
        return r.noisy
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if features is None or r.size == features.n_noisy:
        return r
    if r.size == features.N:
        return r[features.k :]
    raise ParameterError(f"{r.size} scores for a class with N={features.N}, k={features.k}")


def normalizer(features: FeatureSet, r) -> float:
    return float(features.k + np.sum(_noisy_scores(r, features)))


def clean_prototype(features: FeatureSet, normalizer: float) -> np.ndarray:
    if features.k < 1:
        raise ParameterError(f"class {features.class_id} has no clean examples")
    if normalizer <= 0:
        raise ParameterError("normalizer must be positive")
    return features.clean.sum(axis=1) / normalizer


def global_noise_prototype(features: FeatureSet, r, normalizer: float) -> np.ndarray:
    if normalizer <= 0:
        raise ParameterError("normalizer must be positive")
    rn = _noisy_scores(r, features)
    return features.noisy @ rn / normalizer


def assign_windows(noisy_r: np.ndarray, T: int) -> tuple[WindowSpec, np.ndarray]:
    """Equal-width windows over the range of the noisy scores."""
    if T < 1:
        raise ParameterError("T must be >= 1")
    noisy_r = np.asarray(noisy_r, dtype=np.float64)
    if noisy_r.size == 0:
        raise ParameterError("window partition needs at least one noisy score")
    spec = WindowSpec(T, float(noisy_r.min()), float(noisy_r.max()))
    if spec.degenerate:
        return spec, np.full(noisy_r.size, T - 1, dtype=np.int64)
    idx = np.floor((noisy_r - spec.r_min) / spec.width).astype(np.int64)
    return spec, np.clip(idx, 0, T - 1)


def window_partition(r, T: int) -> tuple[WindowSpec, np.ndarray]:
    """Window index for every noisy example; ``r`` is RelevanceScores or the noisy scores."""
    return assign_windows(_noisy_scores(r), T)


def group_sums(noisy_V: np.ndarray, noisy_r: np.ndarray, assignment: np.ndarray, T: int):
    """``sum_i [group(i)=t] r_i v_i`` per group, plus empty flags."""
    protos = np.zeros((noisy_V.shape[0], T))
    weighted = noisy_V * noisy_r[None, :]
    for t in range(T):
        mask = assignment == t
        if np.any(mask):
            protos[:, t] = weighted[:, mask].sum(axis=1)
    empty = np.bincount(assignment, minlength=T)[:T] == 0
    return protos, empty


def windowed_noise_prototypes(features: FeatureSet, r, assignment: np.ndarray, T: int | None = None):
    assignment = np.asarray(assignment, dtype=np.int64)
    if T is None:
        T = int(assignment.max()) + 1 if assignment.size else 1
    return group_sums(features.noisy, _noisy_scores(r, features), assignment, T)


def unified_prototype(features: FeatureSet, r, T: int = 5) -> HybridPrototypes:
    rn = _noisy_scores(r, features)
    norm = float(features.k + rn.sum())
    p_clean = clean_prototype(features, norm)
    p_noise = global_noise_prototype(features, rn, norm)
    if features.n_noisy:
        _, assignment = assign_windows(rn, T)
    else:
        assignment = np.zeros(0, dtype=np.int64)
    protos, empty = group_sums(features.noisy, rn, assignment, T)
    return HybridPrototypes(p_clean, p_noise, protos, empty, assignment, p_clean + p_noise, norm)


# -- feature clustering ------------------------------------------------------


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray  # d x T
    objective: list[float]
    iterations: int


def kmeans(X: np.ndarray, T: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm on the columns of ``X`` (Euclidean), seeded from T distinct points."""
    n = X.shape[1]
    if T < 1 or n < T:
        raise ParameterError(f"cannot form {T} clusters from {n} points")
    rng = make_rng(seed)
    uniq = np.unique(X.T, axis=0, return_index=True)[1]
    if uniq.size < T:
        raise ParameterError(f"only {uniq.size} distinct points for {T} clusters")
    start = np.sort(rng.choice(np.sort(uniq), size=T, replace=False))
    C = X[:, start].copy()
    sq = np.sum(X * X, axis=0)
    assignment = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = sq[:, None] - 2.0 * X.T @ C + np.sum(C * C, axis=0)[None, :]
        new = np.argmin(dist, axis=1)
        history.append(float(np.sum(dist[np.arange(n), new].clip(min=0.0))))
        C_new = C.copy()
        for t in range(T):
            members = new == t
            if np.any(members):
                C_new[:, t] = X[:, members].mean(axis=1)
        shift = float(np.max(np.linalg.norm(C_new - C, axis=0)))
        fixed = assignment is not None and np.array_equal(new, assignment)
        assignment, C = new, C_new
        if fixed or shift < tol:
            break
    return KMeansResult(assignment.astype(np.int64), C, history, it)


def kmeans_noise_prototypes(features: FeatureSet, r, T: int, seed: int = 0):
    """Cluster the noisy features, then relevance-weight each cluster.

    Returns ``(d x T prototypes, assignment)``.
    """
    if features.n_noisy < T:
        raise ParameterError(f"class {features.class_id}: {features.n_noisy} noisy points for {T} clusters")
    res = kmeans(features.noisy, T, seed)
    protos, _ = group_sums(features.noisy, _noisy_scores(r, features), res.assignment, T)
    return protos, res.assignment


def order_clusters_by_clean_affinity(features: FeatureSet, assignment: np.ndarray, T: int) -> np.ndarray:
    """Relabel clusters so index grows with centroid cosine to the clean mean.

    With an increasing weight schedule the cluster nearest the clean
    examples then receives the largest weight.
    """
    clean_mean = features.clean.mean(axis=1)
    cn = np.linalg.norm(clean_mean)
    score = np.full(T, -np.inf)
    for t in range(T):
        members = assignment == t
        if np.any(members):
            c = features.noisy[:, members].mean(axis=1)
            score[t] = c @ clean_mean / max(np.linalg.norm(c) * cn, 1e-12)
    rank = np.empty(T, dtype=np.int64)
    rank[np.argsort(score, kind="stable")] = np.arange(T)
    return rank[assignment]
