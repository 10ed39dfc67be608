"""GCN relevance scorer and the losses that train it.

Scores come from ``r = sigmoid(theta2^T relu(theta1^T V A) A)`` where ``A`` is
the normalized class graph.  Two training objectives are available:

* ``binary`` -- clean examples as positives, every noisy example as a negative.
* ``simnoipro`` -- pull relevance-weighted noise prototypes (per score window
  and globally) toward the clean prototype by maximizing cosine similarity.
  ``simmin`` is the sign-flipped ablation that pushes them away.

Group membership (score windows or k-means clusters) is recomputed every
iteration but held constant inside it, so gradients reach the scores only
through the ``r_i`` weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataio import FeatureSet, RelevanceScores
from .errors import (
    ContractError,
    DegenerateLossError,
    DegeneratePrototypeError,
    NumericError,
    ParameterError,
)
from .graph import AffinityGraph, class_graph
from .numerics import AdamState, LrSchedule, adam_step, make_rng, schedule_rate, sigmoid
from .prototypes import (
    assign_windows,
    group_sums,
    kmeans,
    order_clusters_by_clean_affinity,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("simnoipro", "binary", "simmin")
ALPHA_SCHEDULES = ("increasing", "equal", "decreasing")
GROUPINGS = ("window", "kmeans")
LOG_EPS = 1e-12
NORM_EPS = 1e-12


@dataclass
class GcnParams:
    theta1: np.ndarray  # d x h
    theta2: np.ndarray  # h x 1

    @property
    def hidden(self) -> int:
        return self.theta1.shape[1]

    @classmethod
    def init(cls, d: int, hidden: int, seed: int) -> "GcnParams":
        rng = make_rng(seed)
        b1 = math.sqrt(6.0 / (d + hidden))
        b2 = math.sqrt(6.0 / (hidden + 1))
        return cls(rng.uniform(-b1, b1, size=(d, hidden)), rng.uniform(-b2, b2, size=(hidden, 1)))


def default_hidden(d: int) -> int:
    return max(16, d // 4)


@dataclass(frozen=True)
class CleanerConfig:
    loss: str = "simnoipro"
    T: int = 5
    grouping: str = "window"
    alpha_schedule: str = "increasing"
    alpha_low: float = 0.2
    alpha_high: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    iterations: int = 100
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_period: int = 30
    weight_decay: float = 5e-4
    hidden: Optional[int] = None
    k_neighbors: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ParameterError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.alpha_schedule not in ALPHA_SCHEDULES:
            raise ParameterError(f"alpha schedule must be one of {ALPHA_SCHEDULES}")
        if self.grouping not in GROUPINGS:
            raise ParameterError(f"grouping must be one of {GROUPINGS}")
        if self.T < 1:
            raise ParameterError("T must be >= 1")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.beta < 0 or self.alpha_low < 0 or self.alpha_high < 0 or self.lam < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")

    def alphas(self) -> np.ndarray:
        """Per-window weights, window 0 holding the lowest scores."""
        if self.alpha_schedule == "equal":
            return np.full(self.T, self.alpha_high)
        if self.T == 1:
            return np.array([self.alpha_high])
        ramp = np.linspace(self.alpha_low, self.alpha_high, self.T)
        return ramp if self.alpha_schedule == "increasing" else ramp[::-1].copy()

    def schedule(self) -> LrSchedule:
        return LrSchedule.step_decay(self.lr, self.iterations, self.lr_decay, self.lr_period)


# -- forward / backward ------------------------------------------------------


@dataclass
class GcnCache:
    X1: np.ndarray  # V A           d x N
    H: np.ndarray  # theta1^T V A   h x N
    Z: np.ndarray  # relu(H)
    Y: np.ndarray  # Z A            h x N
    r: np.ndarray


def _check_graph(graph: AffinityGraph, n: int):
    if not graph.normalized:
        raise ContractError("gcn_forward needs a normalized graph")
    if graph.size != n:
        raise ContractError(f"graph has {graph.size} nodes but there are {n} examples")


def gcn_forward_cached(params: GcnParams, graph: AffinityGraph, V: np.ndarray) -> GcnCache:
    V = np.asarray(getattr(V, "V", V), dtype=np.float64)
    _check_graph(graph, V.shape[1])
    A = graph.adjacency
    X1 = V @ A
    H = params.theta1.T @ X1
    Z = np.maximum(H, 0.0)
    Y = Z @ A
    r = sigmoid((params.theta2.T @ Y).reshape(-1))
    return GcnCache(X1, H, Z, Y, r)


def gcn_forward(params: GcnParams, graph: AffinityGraph, features: FeatureSet) -> RelevanceScores:
    cache = gcn_forward_cached(params, graph, features.V)
    return RelevanceScores(cache.r, features.k)


def gcn_backward(params: GcnParams, graph: AffinityGraph, cache: GcnCache, grad_r: np.ndarray):
    """Gradients of a scalar w.r.t. ``(theta1, theta2)`` given ``d/dr``."""
    A = graph.adjacency
    r = cache.r
    g_logit = (np.asarray(grad_r, dtype=np.float64).reshape(-1) * r * (1.0 - r))[None, :]
    d_theta2 = cache.Y @ g_logit.T
    dY = params.theta2 @ g_logit
    dH = (dY @ A.T) * (cache.H > 0)
    d_theta1 = cache.X1 @ dH.T
    return d_theta1, d_theta2


# -- losses ------------------------------------------------------------------


def negative_cosine(p1, p2, eps: float = NORM_EPS) -> float:
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1)
    n1, n2 = np.linalg.norm(p1), np.linalg.norm(p2)
    if n1 <= eps or n2 <= eps:
        raise DegeneratePrototypeError(f"prototype norm below {eps} (|p1|={n1:.3g}, |p2|={n2:.3g})")
    return float(-(p1 / n1) @ (p2 / n2))


def _neg_cos_grad(a: np.ndarray, b: np.ndarray):
    """``M(a, b)`` and its gradients w.r.t. ``a`` and ``b``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    ua, ub = a / na, b / nb
    c = float(ua @ ub)
    return -c, -(ub - c * ua) / na, -(ua - c * ub) / nb


def binary_cleaning_loss(r: RelevanceScores, lam: float = 1.0):
    """Clean-positive / noisy-negative log loss; returns ``(loss, d loss / d r)``."""
    k, N = r.k, r.values.size
    if k < 1 or N <= k:
        raise ParameterError("binary loss needs 1 <= k < N")
    v = r.values
    if np.any((v <= 0.0) | (v >= 1.0)):
        log.warning("relevance scores at 0 or 1 clamped to [%g, 1-%g]", LOG_EPS, LOG_EPS)
    v = np.clip(v, LOG_EPS, 1.0 - LOG_EPS)
    m = N - k
    loss = -np.log(v[:k]).sum() / k - lam * np.log1p(-v[k:]).sum() / m
    grad = np.empty(N)
    grad[:k] = -1.0 / (k * v[:k])
    grad[k:] = lam / (m * (1.0 - v[k:]))
    return float(loss), grad


def _simnoipro_terms(p_clean, window_protos, window_empty, p_noise_global, alphas, beta, sign):
    """Loss value and gradients w.r.t. every prototype argument."""
    if np.linalg.norm(p_clean) <= NORM_EPS:
        raise DegeneratePrototypeError("clean prototype is zero")
    T = window_protos.shape[1]
    g_clean = np.zeros_like(p_clean)
    g_windows = np.zeros_like(window_protos)
    g_global = np.zeros_like(p_noise_global)
    live = [
        t for t in range(T) if not window_empty[t] and np.linalg.norm(window_protos[:, t]) > NORM_EPS
    ]
    use_global = beta != 0.0 and np.linalg.norm(p_noise_global) > NORM_EPS
    if not live and not use_global:
        raise DegenerateLossError("every window is empty and the global term is off")
    loss = 0.0
    for t in live:
        m, ga, gb = _neg_cos_grad(p_clean, window_protos[:, t])
        w = sign * alphas[t] / len(live)
        loss += w * m
        g_clean += w * ga
        g_windows[:, t] = w * gb
    if use_global:
        m, ga, gb = _neg_cos_grad(p_clean, p_noise_global)
        loss += sign * beta * m
        g_clean += sign * beta * ga
        g_global = sign * beta * gb
    return loss, g_clean, g_windows, g_global


def simnoipro_loss(p_clean, window_protos, p_noise_global, alphas, beta: float, minimize: bool = False) -> float:
    """Weighted negative cosines between the clean prototype and noise prototypes.

    ``window_protos`` is ``d x T`` (or a list of vectors); all-zero windows are
    treated as empty and the window average runs over the non-empty ones.
    ``minimize=True`` gives the push-away ablation.
    """
    W = np.column_stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in window_protos]) if isinstance(
        window_protos, (list, tuple)
    ) else np.asarray(window_protos, dtype=np.float64)
    empty = ~np.any(W != 0.0, axis=0)
    sign = -1.0 if minimize else 1.0
    return _simnoipro_terms(
        np.asarray(p_clean, dtype=np.float64).reshape(-1),
        W,
        empty,
        np.asarray(p_noise_global, dtype=np.float64).reshape(-1),
        np.asarray(alphas, dtype=np.float64),
        beta,
        sign,
    )[0]


def simnoipro_objective(features: FeatureSet, r_full: np.ndarray, cfg: CleanerConfig, groups: Optional[np.ndarray] = None):
    """Prototype loss of one class as a function of all N scores.

    Clean scores are pinned to 1, so their gradient is zero.  ``groups`` fixes
    the noisy-example grouping (k-means); otherwise score windows are derived
    from ``r_full``.  Returns ``(loss, d loss / d r, groups)``.
    """
    k = features.k
    rn = np.asarray(r_full, dtype=np.float64)[k:]
    Vn = features.noisy
    T = cfg.T
    if groups is None:
        _, groups = assign_windows(rn, T)
    R = k + rn.sum()
    csum = features.clean.sum(axis=1)
    p_clean = csum / R
    p_noise = Vn @ rn / R
    windows, empty = group_sums(Vn, rn, groups, T)
    sign = -1.0 if cfg.loss == "simmin" else 1.0
    loss, g_clean, g_windows, g_global = _simnoipro_terms(
        p_clean, windows, empty, p_noise, cfg.alphas(), cfg.beta, sign
    )
    # d p_clean/d r_i = -p_clean/R ; d p_noise/d r_i = (v_i - p_noise)/R ; d window_t/d r_i = v_i
    grad_n = (-(g_clean @ p_clean) - (g_global @ p_noise)) / R + (Vn.T @ g_global) / R
    grad_n += np.einsum("dn,dn->n", Vn, g_windows[:, groups])
    grad = np.zeros(features.N)
    grad[k:] = grad_n
    return loss, grad, groups


# -- training ----------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    loss: float
    mean_clean_r: float
    mean_noisy_r: float


@dataclass
class CleaningResult:
    scores: RelevanceScores
    trace: list[TraceRow]
    params: GcnParams
    groups: Optional[np.ndarray] = None

    def trace_csv(self) -> str:
        lines = ["iteration,loss,mean_clean_r,mean_noisy_r"]
        lines += [f"{t.iteration},{t.loss!r},{t.mean_clean_r!r},{t.mean_noisy_r!r}" for t in self.trace]
        return "\n".join(lines) + "\n"


def class_loss(features: FeatureSet, r_full: np.ndarray, cfg: CleanerConfig, groups=None):
    if cfg.loss == "binary":
        loss, grad = binary_cleaning_loss(RelevanceScores(r_full, features.k), cfg.lam)
        return loss, grad, None
    return simnoipro_objective(features, r_full, cfg, groups)


def full_objective(params: GcnParams, graph: AffinityGraph, features: FeatureSet, cfg: CleanerConfig, groups=None):
    """Loss and ``(d theta1, d theta2)`` for the configured objective."""
    cache = gcn_forward_cached(params, graph, features.V)
    loss, grad_r, _ = class_loss(features, cache.r, cfg, groups)
    return loss, gcn_backward(params, graph, cache, grad_r)


def fixed_cluster_groups(features: FeatureSet, cfg: CleanerConfig) -> np.ndarray:
    res = kmeans(features.noisy, cfg.T, cfg.seed)
    return order_clusters_by_clean_affinity(features, res.assignment, cfg.T)


def train_cleaner(features: FeatureSet, graph: Optional[AffinityGraph], cfg: CleanerConfig) -> CleaningResult:
    """Full-batch Adam on one class; returns final scores and the per-iteration trace."""
    features.validate_for_cleaning()
    if graph is None:
        graph = class_graph(features, cfg.k_neighbors)
    hidden = cfg.hidden or default_hidden(features.d)
    params = GcnParams.init(features.d, hidden, cfg.seed)
    s1 = AdamState.zeros_like(params.theta1, weight_decay=cfg.weight_decay)
    s2 = AdamState.zeros_like(params.theta2, weight_decay=cfg.weight_decay)
    groups = None
    if cfg.loss != "binary" and cfg.grouping == "kmeans":
        groups = fixed_cluster_groups(features, cfg)
    sched = cfg.schedule()
    trace = []
    k = features.k
    for it in range(cfg.iterations):
        cache = gcn_forward_cached(params, graph, features.V)
        loss, grad_r, _ = class_loss(features, cache.r, cfg, groups)
        if not math.isfinite(loss):
            raise NumericError(f"class {features.class_id}: non-finite loss at iteration {it}")
        trace.append(TraceRow(it, loss, float(cache.r[:k].mean()), float(cache.r[k:].mean())))
        g1, g2 = gcn_backward(params, graph, cache, grad_r)
        lr = schedule_rate(sched, it)
        params = GcnParams(
            adam_step(params.theta1, g1, s1, lr, "theta1"),
            adam_step(params.theta2, g2, s2, lr, "theta2"),
        )
    final = gcn_forward_cached(params, graph, features.V).r
    return CleaningResult(RelevanceScores(final, k), trace, params, groups)


# -- reweighting baselines ---------------------------------------------------


def constant_scores(features: FeatureSet, value: float) -> RelevanceScores:
    """Every noisy example gets the same relevance (``0`` drops them, ``beta`` is beta-weighting)."""
    return RelevanceScores(np.concatenate([np.ones(features.k), np.full(features.n_noisy, float(value))]), features.k)


def similarity_scores(features: FeatureSet) -> RelevanceScores:
    """Cosine of each noisy feature to the clean mean, negatives clamped to 0."""
    c = features.clean.mean(axis=1)
    Vn = features.noisy
    cos = (Vn.T @ c) / np.maximum(np.linalg.norm(Vn, axis=0) * np.linalg.norm(c), NORM_EPS)
    return RelevanceScores(np.concatenate([np.ones(features.k), np.clip(cos, 0.0, 1.0)]), features.k)
