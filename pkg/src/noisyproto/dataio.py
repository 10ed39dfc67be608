"""Feature containers, CSV interchange, synthetic data and k-shot trial sampling.

Binary container layout (little-endian)::

    b"FNP1" | u32 version=1 | u32 d | u32 N | u32 k | u32 class_id | u8 has_flags
    d*N float64, column-major
    N-k bytes of 0/1 planted-relevance flags (only if has_flags)
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ParameterError
from .numerics import l2_normalize_columns, make_rng

MAGIC = b"FNP1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB")


@dataclass
class FeatureSet:
    """Features of one class; columns ``[:k]`` are clean, the rest noisy."""

    V: np.ndarray
    k: int
    class_id: int = 0
    planted: Optional[np.ndarray] = None

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.V.ndim != 2:
            raise ParameterError("feature matrix must be d x N")
        if not 0 <= self.k <= self.V.shape[1]:
            raise ParameterError(f"clean count k={self.k} outside [0, N={self.V.shape[1]}]")
        if self.planted is not None:
            self.planted = np.asarray(self.planted, dtype=bool)
            if self.planted.shape != (self.n_noisy,):
                raise ParameterError("planted flags must cover exactly the noisy examples")

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @property
    def N(self) -> int:
        return self.V.shape[1]

    @property
    def n_noisy(self) -> int:
        return self.V.shape[1] - self.k

    @property
    def clean(self) -> np.ndarray:
        return self.V[:, : self.k]

    @property
    def noisy(self) -> np.ndarray:
        return self.V[:, self.k :]

    def validate_for_cleaning(self):
        if not 1 <= self.k < self.N:
            raise ParameterError(f"class {self.class_id}: cleaning needs 1 <= k < N (k={self.k}, N={self.N})")
        if not np.all(np.isfinite(self.V)):
            raise ParameterError(f"class {self.class_id}: non-finite features")

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        same_flags = (self.planted is None and other.planted is None) or (
            self.planted is not None and other.planted is not None and np.array_equal(self.planted, other.planted)
        )
        return (
            self.k == other.k
            and self.class_id == other.class_id
            and self.V.shape == other.V.shape
            and self.V.tobytes() == other.V.tobytes()
            and same_flags
        )


@dataclass
class RelevanceScores:
    """Per-example relevance of one class; ``values[:k]`` belong to clean examples."""

    values: np.ndarray
    k: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    @property
    def noisy(self) -> np.ndarray:
        return self.values[self.k :]

    def pinned(self) -> np.ndarray:
        """Weights used for prototypes: clean entries forced to 1."""
        out = self.values.copy()
        out[: self.k] = 1.0
        return out


# -- binary container --------------------------------------------------------


def encode_features(fs: FeatureSet) -> bytes:
    has_flags = fs.planted is not None
    head = _HEADER.pack(MAGIC, VERSION, fs.d, fs.N, fs.k, fs.class_id, int(has_flags))
    body = np.asarray(fs.V, dtype="<f8").tobytes(order="F")
    tail = fs.planted.astype(np.uint8).tobytes() if has_flags else b""
    return head + body + tail


def decode_features(data: bytes) -> FeatureSet:
    if len(data) < _HEADER.size:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise FormatError("bad magic", 0)
        raise FormatError("truncated header", len(data))
    magic, version, d, n, k, class_id, has_flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if k > n:
        raise FormatError(f"clean count {k} exceeds N={n}", 16)
    if has_flags not in (0, 1):
        raise FormatError("flags byte must be 0 or 1", 24)
    pos = _HEADER.size
    n_values = d * n
    need = pos + 8 * n_values + (n - k if has_flags else 0)
    if need > len(data):
        raise FormatError(f"payload for d={d}, N={n} exceeds file size {len(data)}", len(data))
    if need < len(data):
        raise FormatError("trailing bytes after payload", need)
    V = np.frombuffer(data, dtype="<f8", count=n_values, offset=pos).reshape((d, n), order="F")
    V = V.astype(np.float64)
    pos += 8 * n_values
    planted = None
    if has_flags:
        raw = np.frombuffer(data, dtype=np.uint8, count=n - k, offset=pos)
        if np.any(raw > 1):
            raise FormatError("planted flag byte not 0/1", pos + int(np.argmax(raw > 1)))
        planted = raw.astype(bool)
    return FeatureSet(V, int(k), int(class_id), planted)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_features(fs: FeatureSet, path):
    atomic_write_bytes(path, encode_features(fs))


def load_features(path) -> FeatureSet:
    return decode_features(Path(path).read_bytes())


# -- CSV ---------------------------------------------------------------------


def write_features_csv(sets: Sequence[FeatureSet], path):
    """One row per example: ``class,id,is_clean,f0..f{d-1}``."""
    d = sets[0].d if sets else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "id", "is_clean"] + [f"f{j}" for j in range(d)])
        for fs in sets:
            for i in range(fs.N):
                w.writerow([fs.class_id, i, int(i < fs.k)] + [repr(float(x)) for x in fs.V[:, i]])


def read_features_csv(path) -> list[FeatureSet]:
    rows: dict[int, list[tuple[int, int, list[float]]]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[:3] != ["class", "id", "is_clean"]:
            raise ParameterError(f"{path}: expected header class,id,is_clean,f0..")
        for row in r:
            if not row:
                continue
            rows.setdefault(int(row[0]), []).append((int(row[2]), int(row[1]), [float(x) for x in row[3:]]))
    sets = []
    for cid in sorted(rows):
        # clean rows first, then by id
        items = sorted(rows[cid], key=lambda t: (-t[0], t[1]))
        V = np.array([t[2] for t in items], dtype=np.float64).T
        k = sum(t[0] for t in items)
        sets.append(FeatureSet(V, k, cid))
    return sets


def save_scores(scores: RelevanceScores, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["index,is_clean,r"]
    lines += [f"{i},{int(i < scores.k)},{float(v)!r}" for i, v in enumerate(scores.values)]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def load_scores(path) -> RelevanceScores:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        rows = list(r)
    if not rows or "r" not in rows[0]:
        raise ParameterError(f"{path}: not a relevance score file")
    values = np.array([float(row["r"]) for row in rows])
    k = sum(int(row["is_clean"]) for row in rows)
    return RelevanceScores(values, k)


# -- synthetic generator -----------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 5
    dim: int = 64
    clean: int = 5
    noisy: int = 200
    rho: float = 0.2
    sigma_in: float = 0.05
    sigma_out: float = 0.3
    seed: int = 0
    # 0: every irrelevant example gets its own random direction;
    # n > 0: irrelevant examples of a class scatter around n distractor directions
    distractors: int = 0
    queries: int = 50
    val_queries: int = 20

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError("rho must lie in [0, 1]")
        if self.sigma_in <= 0 or self.sigma_out <= 0:
            raise ParameterError("spreads must be positive")
        if self.classes < 1 or self.dim < 1 or self.clean < 0 or self.noisy < 0:
            raise ParameterError("counts must be non-negative (classes, dim >= 1)")


@dataclass
class SynthData:
    classes: list[FeatureSet]
    centers: np.ndarray
    test: list[FeatureSet] = field(default_factory=list)
    val: list[FeatureSet] = field(default_factory=list)


def _around(rng, direction: np.ndarray, sigma: float, n: int) -> np.ndarray:
    pts = direction[:, None] + rng.normal(0.0, sigma, size=(direction.size, n))
    return l2_normalize_columns(pts)


def synthesize(spec: SynthSpec) -> SynthData:
    """Few-clean/many-noisy classes with planted relevance flags.

    Query sets (``test``, ``val``) are stored as all-clean FeatureSets.
    """
    rng = make_rng(spec.seed)
    d = spec.dim
    centers = l2_normalize_columns(rng.normal(size=(d, spec.classes)))
    classes, test, val = [], [], []
    n_rel = int(round(spec.rho * spec.noisy))
    for c in range(spec.classes):
        center = centers[:, c]
        clean = _around(rng, center, spec.sigma_in, spec.clean)
        planted = np.zeros(spec.noisy, dtype=bool)
        planted[rng.permutation(spec.noisy)[:n_rel]] = True
        noisy = np.empty((d, spec.noisy))
        noisy[:, planted] = _around(rng, center, spec.sigma_in, n_rel)
        n_irr = spec.noisy - n_rel
        if spec.distractors > 0:
            dirs = l2_normalize_columns(rng.normal(size=(d, spec.distractors)))
            which = rng.integers(0, spec.distractors, size=n_irr)
            base = dirs[:, which]
        else:
            base = l2_normalize_columns(rng.normal(size=(d, n_irr)))
        noisy[:, ~planted] = l2_normalize_columns(base + rng.normal(0.0, spec.sigma_out, size=(d, n_irr)))
        classes.append(FeatureSet(np.hstack([clean, noisy]), spec.clean, c, planted))
        test.append(FeatureSet(_around(rng, center, spec.sigma_in, spec.queries), spec.queries, c))
        val.append(FeatureSet(_around(rng, center, spec.sigma_in, spec.val_queries), spec.val_queries, c))
    return SynthData(classes, centers, test, val)


# -- trials ------------------------------------------------------------------


@dataclass(frozen=True)
class TrialSpec:
    shot: int = 5
    trials: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.shot < 1:
            raise ParameterError("shot must be >= 1")
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")


def sample_trial(pool: Sequence[FeatureSet], spec: TrialSpec, trial: int) -> list[FeatureSet]:
    """Draw ``spec.shot`` clean examples per class; all noisy examples are kept."""
    rng = make_rng(spec.seed + trial)
    out = []
    for fs in pool:
        if fs.k < spec.shot:
            raise ParameterError(f"class {fs.class_id}: clean pool has {fs.k} examples, need {spec.shot}")
        pick = np.sort(rng.choice(fs.k, size=spec.shot, replace=False))
        V = np.hstack([fs.V[:, pick], fs.noisy])
        out.append(FeatureSet(V, spec.shot, fs.class_id, None if fs.planted is None else fs.planted.copy()))
    return out


def sample_trials(pool: Sequence[FeatureSet], spec: TrialSpec) -> list[list[FeatureSet]]:
    return [sample_trial(pool, spec, t) for t in range(spec.trials)]


def stack_queries(sets: Sequence[FeatureSet]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate query sets into ``(d x Q features, class ids)``."""
    V = np.hstack([fs.V for fs in sets])
    labels = np.concatenate([np.full(fs.N, fs.class_id, dtype=np.int64) for fs in sets])
    return V, labels
