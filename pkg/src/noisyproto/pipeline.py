"""Per-trial orchestration: relevance -> prototypes -> classifier -> metrics."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .classifier import (
    DEFAULT_TEMPERATURE,
    TrainBatchSpec,
    init_from_prototypes,
    prototype_rank_batch,
    rank_classes,
    topk_accuracy,
    train_classifier,
    trial_summary,
)
from .cleaner import CleanerConfig, CleaningResult, constant_scores, similarity_scores, train_cleaner
from .dataio import FeatureSet, RelevanceScores, TrialSpec, sample_trial, stack_queries
from .errors import ParameterError
from .prototypes import HybridPrototypes, unified_prototype

log = logging.getLogger(__name__)

CLEANING_METHODS = ("simnoipro", "binary", "simmin")
METHODS = CLEANING_METHODS + ("clean-only", "beta", "similarity")
MODES = ("cosine", "prototype")


@dataclass(frozen=True)
class PipelineSettings:
    method: str = "simnoipro"
    mode: str = "cosine"
    cleaner: CleanerConfig = field(default_factory=CleanerConfig)
    train: TrainBatchSpec = field(default_factory=TrainBatchSpec)
    temperature: float = DEFAULT_TEMPERATURE
    beta_weight: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")


def class_cleaner_config(cfg: CleanerConfig, method: str, class_id: int) -> CleanerConfig:
    return replace(cfg, loss=method, seed=cfg.seed + class_id)


def _clean(args) -> CleaningResult:
    fs, cfg = args
    return train_cleaner(fs, None, cfg)


def clean_classes(classes: Sequence[FeatureSet], cfg: CleanerConfig, method: str = "simnoipro", workers: int = 1) -> list[CleaningResult]:
    """Train one scorer per class; output order is class order regardless of ``workers``."""
    jobs = [(fs, class_cleaner_config(cfg, method, fs.class_id)) for fs in classes]
    if workers == 1 or len(jobs) < 2:
        return [_clean(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_clean, jobs))


def relevance(classes: Sequence[FeatureSet], settings: PipelineSettings) -> list[RelevanceScores]:
    m = settings.method
    if m in CLEANING_METHODS:
        return [res.scores for res in clean_classes(classes, settings.cleaner, m, settings.workers)]
    if m == "clean-only":
        return [constant_scores(fs, 0.0) for fs in classes]
    if m == "beta":
        return [constant_scores(fs, settings.beta_weight) for fs in classes]
    return [similarity_scores(fs) for fs in classes]


def build_prototypes(classes: Sequence[FeatureSet], scores: Sequence[RelevanceScores], T: int) -> list[HybridPrototypes]:
    return [unified_prototype(fs, r, T) for fs, r in zip(classes, scores)]


def training_set(classes: Sequence[FeatureSet], scores: Sequence[RelevanceScores]):
    """Stack all examples with their weights (clean 1, noisy r); zero-weight examples are dropped."""
    V = np.hstack([fs.V for fs in classes])
    labels = np.concatenate([np.full(fs.N, fs.class_id, dtype=np.int64) for fs in classes])
    weights = np.concatenate([r.pinned() for r in scores])
    keep = weights > 0
    return V[:, keep], labels[keep], weights[keep]


def fit_classifier(classes, scores, protos, settings: PipelineSettings):
    clf = init_from_prototypes([p.p_unified for p in protos], [fs.class_id for fs in classes], settings.temperature)
    V, y, w = training_set(classes, scores)
    clf, _ = train_classifier(clf, V, y, w, settings.train)
    return clf


def rankings(classes, scores, protos, queries: np.ndarray, settings: PipelineSettings) -> np.ndarray:
    ids = [fs.class_id for fs in classes]
    if settings.mode == "prototype":
        return prototype_rank_batch([p.p_unified for p in protos], queries, ids)
    clf = fit_classifier(classes, scores, protos, settings)
    return rank_classes(clf, queries)


def run_trial(classes: Sequence[FeatureSet], queries: np.ndarray, labels: np.ndarray, settings: PipelineSettings) -> dict:
    scores = relevance(classes, settings)
    protos = build_prototypes(classes, scores, settings.cleaner.T)
    R = rankings(classes, scores, protos, queries, settings)
    return {"top1": topk_accuracy(R, labels, 1), "top5": topk_accuracy(R, labels, min(5, len(classes)))}


def evaluate(pool: Sequence[FeatureSet], test: Sequence[FeatureSet], shots: Sequence[int], trials: int, trial_seed: int, settings: PipelineSettings) -> dict:
    """Per-shot mean and sample std of top-1/top-5 over seeded trials.

    ``test`` holds the query sets, one all-clean FeatureSet per class.
    """
    queries, labels = stack_queries(test)
    result = {}
    for shot in shots:
        spec = TrialSpec(shot, trials, trial_seed)
        per_trial = []
        for t in range(trials):
            classes = sample_trial(pool, spec, t)
            per_trial.append(run_trial(classes, queries, labels, settings))
            log.info("shot %d trial %d: %s", shot, t, per_trial[-1])
        entry = {"trials": per_trial}
        for key in per_trial[0]:
            entry[key] = trial_summary([p[key] for p in per_trial])
        result[str(shot)] = entry
    return result


def roc_auc(scores, flags) -> float:
    """Probability that a flagged example outscores an unflagged one (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    pos, neg = s[f], s[~f]
    if pos.size == 0 or neg.size == 0:
        raise ParameterError("AUC needs both positive and negative examples")
    diff = pos[:, None] - neg[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / (pos.size * neg.size))
