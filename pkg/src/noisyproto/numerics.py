"""Dense float64 helpers, Adam, learning-rate schedules and a finite-difference oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Shapes follow
the column convention used throughout the package: a feature matrix is
``d x N`` with one example per column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; identical seeds give identical streams."""
    return np.random.default_rng(np.uint64(seed % 2**64))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got ndim={m.ndim}")
    return m


def check_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.asarray(a)))[0]
        raise NumericError(f"non-finite entry in {what} at index {tuple(int(i) for i in bad)}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def l2_normalize_columns(m, eps: float = 1e-12) -> np.ndarray:
    m = as_matrix(m)
    norms = np.sqrt(np.sum(m * m, axis=0))
    return m / np.maximum(norms, eps)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), **kwargs)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float, name: str = "params") -> np.ndarray:
    """One Adam update with the L2 penalty folded into the gradient.

    Returns the new parameters; ``state`` is updated in place.
    """
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError(
            f"adam shapes disagree for {name}: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NumericError(f"non-finite gradient for parameter '{name}'")
    g = grads + state.weight_decay * params if state.weight_decay else grads
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    out = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return check_finite(out, name)


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    kind: str  # "step-decay" | "cosine-anneal"
    initial: float
    total: int
    factor: float = 0.1
    period: int = 30
    final: float = 0.0

    def __post_init__(self):
        if self.kind not in ("step-decay", "cosine-anneal"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.initial <= 0 or self.total < 1:
            raise ValueError("schedule needs a positive initial rate and total >= 1")

    @classmethod
    def step_decay(cls, initial: float, total: int, factor: float = 0.1, period: int = 30) -> "LrSchedule":
        return cls("step-decay", initial, total, factor=factor, period=period)

    @classmethod
    def cosine(cls, initial: float, final: float, total: int) -> "LrSchedule":
        return cls("cosine-anneal", initial, total, final=final)


def schedule_rate(s: LrSchedule, step: int) -> float:
    if not 0 <= step < s.total:
        raise ValueError(f"step {step} outside [0, {s.total})")
    if s.kind == "step-decay":
        return s.initial * s.factor ** (step // s.period)
    # the last step lands exactly on the final rate
    if s.total == 1:
        return s.initial
    frac = step / (s.total - 1)
    return s.final + (s.initial - s.final) * (1.0 + math.cos(math.pi * frac)) / 2.0


# -- gradient oracle ---------------------------------------------------------


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"objective not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
