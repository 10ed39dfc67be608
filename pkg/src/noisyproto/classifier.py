"""Relevance-weighted cosine classifier and prototype nearest matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegeneratePrototypeError, NumericError, ParameterError
from .numerics import AdamState, LrSchedule, adam_step, l2_normalize_columns, make_rng, schedule_rate

DEFAULT_TEMPERATURE = 15.0
NORM_EPS = 1e-12


@dataclass
class CosineClassifier:
    W: np.ndarray  # d x C
    s: float = DEFAULT_TEMPERATURE
    class_ids: np.ndarray = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        C = self.W.shape[1]
        if C < 2:
            raise ParameterError("a classifier needs at least two classes")
        if self.s <= 0:
            raise ParameterError("temperature must be positive")
        if self.class_ids is None:
            self.class_ids = np.arange(C)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.class_ids.shape != (C,):
            raise ParameterError("one class id per weight column")

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def logits(self, V: np.ndarray) -> np.ndarray:
        """``N x C`` scaled cosines for the columns of ``V``."""
        V = np.asarray(V, dtype=np.float64)
        if V.ndim == 1:
            V = V[:, None]
        return self.s * (l2_normalize_columns(V).T @ l2_normalize_columns(self.W))

    def probabilities(self, V: np.ndarray) -> np.ndarray:
        return softmax(self.logits(V))

    def label_index(self, labels) -> np.ndarray:
        lookup = {int(c): i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(y)] for y in np.asarray(labels).reshape(-1)], dtype=np.int64)
        except KeyError as exc:
            raise ParameterError(f"unknown class id {exc.args[0]}") from None


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_from_prototypes(protos, class_ids: Sequence[int] | None = None, s: float = DEFAULT_TEMPERATURE) -> CosineClassifier:
    """Weight columns start as the class prototypes (``d x C`` or a list of vectors)."""
    if isinstance(protos, (list, tuple)):
        P = np.column_stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in protos])
    else:
        P = np.array(protos, dtype=np.float64)
    ids = np.arange(P.shape[1]) if class_ids is None else np.asarray(class_ids)
    norms = np.linalg.norm(P, axis=0)
    for j in np.flatnonzero(norms <= NORM_EPS):
        raise DegeneratePrototypeError(f"class {int(ids[j])} has a zero prototype")
    return CosineClassifier(P.copy(), s, ids)


def weighted_ce_loss(clf: CosineClassifier, V: np.ndarray, labels, weights, class_norm=None):
    """Relevance-weighted cosine softmax loss and its gradient w.r.t. ``W``.

    Each class's terms are divided by that class's total weight.  By default
    the totals are taken over the examples passed in, which makes a minibatch
    call an estimate of the full objective and a full-set call exact.
    """
    V = np.asarray(V, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    y = clf.label_index(labels)
    C = clf.num_classes
    if class_norm is None:
        class_norm = np.bincount(y, weights=w, minlength=C)
    class_norm = np.asarray(class_norm, dtype=np.float64)
    per_ex = np.where(class_norm[y] > 0, w / np.where(class_norm[y] > 0, class_norm[y], 1.0), 0.0)

    Vh = l2_normalize_columns(V)
    wnorm = np.maximum(np.linalg.norm(clf.W, axis=0), NORM_EPS)
    Wh = clf.W / wnorm
    z = clf.s * (Vh.T @ Wh)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if not np.all(np.isfinite(logp)):
        raise NumericError("non-finite softmax")
    n = V.shape[1]
    loss = -float(per_ex @ logp[np.arange(n), y])
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz *= per_ex[:, None]
    dWh = clf.s * (Vh @ dz)
    dW = (dWh - Wh * np.sum(Wh * dWh, axis=0, keepdims=True)) / wnorm
    return loss, dW


@dataclass(frozen=True)
class TrainBatchSpec:
    batch_size: int = 512
    epochs: int = 50
    lr: float = 0.1
    lr_final: float = 0.001
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")

    def schedule(self) -> LrSchedule:
        return LrSchedule.cosine(self.lr, self.lr_final, self.epochs)


def train_classifier(clf: CosineClassifier, V: np.ndarray, labels, weights, spec: TrainBatchSpec):
    """Seeded shuffled minibatch Adam; returns ``(trained classifier, per-epoch mean loss)``."""
    V = np.asarray(V, dtype=np.float64)
    n = V.shape[1]
    if n == 0:
        raise ParameterError("empty training set")
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    rng = make_rng(spec.seed)
    sched = spec.schedule()
    W = clf.W.copy()
    state = AdamState.zeros_like(W, weight_decay=spec.weight_decay)
    history = []
    for epoch in range(spec.epochs):
        lr = schedule_rate(sched, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            cur = CosineClassifier(W, clf.s, clf.class_ids)
            loss, dW = weighted_ce_loss(cur, V[:, idx], labels[idx], weights[idx])
            W = adam_step(W, dW, state, lr, "W")
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return CosineClassifier(W, clf.s, clf.class_ids), history


def rank_classes(clf: CosineClassifier, V: np.ndarray) -> np.ndarray:
    """``N x C`` class ids by descending score; ties go to the lower class id."""
    z = clf.logits(V)
    out = np.empty(z.shape, dtype=np.int64)
    for i in range(z.shape[0]):
        out[i] = clf.class_ids[np.lexsort((clf.class_ids, -z[i]))]
    return out


def predict_topk(clf: CosineClassifier, feature: np.ndarray, topk: int) -> list[int]:
    if not 1 <= topk <= clf.num_classes:
        raise ParameterError(f"topk must lie in [1, {clf.num_classes}]")
    return [int(c) for c in rank_classes(clf, np.asarray(feature).reshape(-1, 1))[0, :topk]]


def prototype_nn_classify(protos, feature, class_ids: Sequence[int] | None = None) -> int:
    """Class whose prototype has the highest cosine to ``feature``."""
    return int(prototype_nn_batch(protos, np.asarray(feature, dtype=np.float64).reshape(-1, 1), class_ids)[0])


def prototype_rank_batch(protos, V: np.ndarray, class_ids: Sequence[int] | None = None) -> np.ndarray:
    """``N x C`` class ids ordered by cosine to the prototypes; ties go to the lower id."""
    P = np.column_stack(protos) if isinstance(protos, (list, tuple)) else np.asarray(protos, dtype=np.float64)
    ids = np.arange(P.shape[1]) if class_ids is None else np.asarray(class_ids, dtype=np.int64)
    V = np.asarray(V, dtype=np.float64)
    if np.any(np.linalg.norm(V, axis=0) <= NORM_EPS):
        raise DegeneratePrototypeError("query feature has zero norm")
    sims = l2_normalize_columns(V).T @ l2_normalize_columns(P)
    out = np.empty(sims.shape, dtype=np.int64)
    for i in range(V.shape[1]):
        out[i] = ids[np.lexsort((ids, -sims[i]))]
    return out


def prototype_nn_batch(protos, V: np.ndarray, class_ids: Sequence[int] | None = None) -> np.ndarray:
    return prototype_rank_batch(protos, V, class_ids)[:, 0]


def topk_accuracy(rankings, labels, k: int) -> float:
    """Fraction of rows whose true label is among the first ``k`` entries."""
    R = np.asarray(rankings)
    if R.ndim == 1:
        R = R[:, None]
    y = np.asarray(labels).reshape(-1)
    if R.shape[0] != y.size:
        raise ParameterError("rankings and labels are not aligned")
    if y.size == 0:
        return 0.0
    return float(np.mean(np.any(R[:, :k] == y[:, None], axis=1)))


def trial_summary(values: Sequence[float]) -> dict:
    """Mean and sample standard deviation (ddof=1) across trials."""
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "std_kind": "sample", "n": int(v.size)}
