"""Flat key=value pipeline configuration with source tracking.

Precedence: command-line flag > config file (or manifest) > built-in default.
Keys are kebab-case; ``snake_case`` spellings are accepted in files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .classifier import TrainBatchSpec
from .cleaner import ALPHA_SCHEDULES, GROUPINGS, LOSS_KINDS, CleanerConfig
from .dataio import SynthSpec
from .errors import ConfigError, NoisyProtoError
from .pipeline import METHODS, MODES, PipelineSettings


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def standard_grid() -> list[float]:
    """0.01..0.1 in steps of 0.01, then 0.2..1.0 in steps of 0.1."""
    return [round(0.01 * i, 2) for i in range(1, 11)] + [round(0.1 * i, 1) for i in range(2, 11)]


def _grid(text: str) -> list[float]:
    text = str(text).strip()
    if text == "standard":
        return standard_grid()
    return [float(x) for x in text.split(",") if x.strip()]


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple = ()


KEYS: dict[str, Key] = {
    k.name: k
    for k in [
        # synthetic data
        Key("classes", int, 5, "number of classes"),
        Key("dim", int, 64, "feature dimension"),
        Key("clean", int, 5, "clean examples per class in the pool"),
        Key("noisy", int, 200, "noisy examples per class"),
        Key("rho", float, 0.2, "fraction of relevant noisy examples"),
        Key("sigma-in", float, 0.05, "spread of clean/relevant examples"),
        Key("sigma-out", float, 0.3, "spread of irrelevant examples"),
        Key("distractors", int, 0, "distractor directions per class (0: independent random)"),
        Key("queries", int, 50, "test queries per class"),
        Key("val-queries", int, 20, "validation queries per class"),
        Key("synth-seed", int, 0, "seed of the synthetic generator"),
        # cleaner
        Key("loss", str, "simnoipro", "cleaner objective", LOSS_KINDS),
        Key("groups", int, 5, "number of noise groups T"),
        Key("grouping", str, "window", "noise grouping", GROUPINGS),
        Key("alpha-schedule", str, "increasing", "per-group weight schedule", ALPHA_SCHEDULES),
        Key("alpha-low", float, 0.2, "smallest group weight"),
        Key("alpha-high", float, 1.0, "largest group weight"),
        Key("beta", float, 1.0, "weight of the global noise term"),
        Key("lam", float, 1.0, "noisy-term balance of the binary loss"),
        Key("iterations", int, 100, "cleaner iterations"),
        Key("lr", float, 0.1, "cleaner initial learning rate"),
        Key("lr-decay", float, 0.1, "cleaner step-decay factor"),
        Key("lr-period", int, 30, "cleaner step-decay period"),
        Key("weight-decay", float, 5e-4, "cleaner L2 weight decay"),
        Key("hidden", int, 0, "GCN hidden width (0: max(16, d/4))"),
        Key("k-neighbors", int, 10, "mutual-kNN neighbours"),
        Key("seed", int, 0, "base seed for cleaner and classifier"),
        # classifier
        Key("batch-size", int, 512, "classifier minibatch size"),
        Key("epochs", int, 50, "classifier epochs"),
        Key("clf-lr", float, 0.1, "classifier initial learning rate"),
        Key("clf-lr-final", float, 0.001, "classifier final learning rate"),
        Key("clf-weight-decay", float, 0.0, "classifier L2 weight decay"),
        Key("temperature", float, 15.0, "cosine classifier temperature s"),
        # evaluation
        Key("method", str, "cleaner", "relevance method ('cleaner' follows --loss)", ("cleaner",) + METHODS),
        Key("mode", str, "cosine", "cosine classifier or prototype nearest matching", MODES),
        Key("beta-weight", float, 1.0, "constant noisy weight of the beta-weighting baseline"),
        Key("shots", _int_list, [5], "comma-separated shot counts"),
        Key("trials", int, 5, "trials per shot"),
        Key("trial-seed", int, 0, "base seed of trial sampling"),
        Key("sweep-alphas", _grid, "standard", "alpha grid ('standard' or comma list)"),
        Key("sweep-betas", _grid, "standard", "beta grid ('standard' or comma list)"),
        Key("bins", int, 10, "histogram bins"),
        # paths and runtime
        Key("out", str, "run", "output directory"),
        Key("data", str, "", "input run directory with features/ (default: --out)"),
        Key("scores", str, "", "relevance scores directory or file (default: <out>/scores)"),
        Key("classifier", str, "", "trained classifier directory to evaluate"),
        Key("workers", int, 1, "worker processes for per-class cleaning"),
    ]
}


def normalize_key(name: str) -> str:
    return name.strip().replace("_", "-")


def parse_value(key: str, raw: Any) -> Any:
    spec = KEYS[key]
    try:
        if not isinstance(raw, str) and spec.parse in (_int_list, _grid):
            raw = _unparse(raw)
        value = spec.parse(raw.strip() if isinstance(raw, str) else raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key} must be one of {', '.join(spec.choices)}; got {value!r}")
    return value


def _unparse(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


class Resolved(dict):
    """Resolved values plus the source of each (``default``, ``file``, ``manifest``, ``flag``)."""

    def __init__(self):
        super().__init__()
        self.sources: dict[str, str] = {}

    def record(self) -> dict:
        return {k: {"value": self[k], "source": self.sources[k]} for k in sorted(self)}


def resolve(flags: dict[str, Any], file_values: dict[str, Any] | None = None, file_source: str = "file") -> Resolved:
    res = Resolved()
    file_values = file_values or {}
    for key, spec in KEYS.items():
        if key in flags and flags[key] is not None:
            res[key], res.sources[key] = parse_value(key, flags[key]), "flag"
        elif key in file_values:
            res[key], res.sources[key] = parse_value(key, file_values[key]), file_source
        else:
            res[key], res.sources[key] = parse_value(key, spec.default), "default"
    for key in set(file_values) - set(KEYS):
        raise ConfigError(f"unknown key {key!r}")
    validate(res)
    return res


def validate(cfg: Resolved):
    try:
        synth_spec(cfg)
        cleaner_config(cfg)
        settings(cfg)
    except NoisyProtoError as exc:
        raise ConfigError(str(exc)) from None
    if any(s < 1 for s in cfg["shots"]) or not cfg["shots"]:
        raise ConfigError("shots must be a non-empty list of positive integers")
    if cfg["trials"] < 1:
        raise ConfigError("trials must be >= 1")
    if cfg["bins"] < 1:
        raise ConfigError("bins must be >= 1")
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")


def synth_spec(cfg) -> SynthSpec:
    return SynthSpec(
        classes=cfg["classes"],
        dim=cfg["dim"],
        clean=cfg["clean"],
        noisy=cfg["noisy"],
        rho=cfg["rho"],
        sigma_in=cfg["sigma-in"],
        sigma_out=cfg["sigma-out"],
        seed=cfg["synth-seed"],
        distractors=cfg["distractors"],
        queries=cfg["queries"],
        val_queries=cfg["val-queries"],
    )


def cleaner_config(cfg, **overrides) -> CleanerConfig:
    values = dict(
        loss=cfg["loss"],
        T=cfg["groups"],
        grouping=cfg["grouping"],
        alpha_schedule=cfg["alpha-schedule"],
        alpha_low=cfg["alpha-low"],
        alpha_high=cfg["alpha-high"],
        beta=cfg["beta"],
        lam=cfg["lam"],
        iterations=cfg["iterations"],
        lr=cfg["lr"],
        lr_decay=cfg["lr-decay"],
        lr_period=cfg["lr-period"],
        weight_decay=cfg["weight-decay"],
        hidden=cfg["hidden"] or None,
        k_neighbors=cfg["k-neighbors"],
        seed=cfg["seed"],
    )
    values.update(overrides)
    return CleanerConfig(**values)


def train_spec(cfg) -> TrainBatchSpec:
    return TrainBatchSpec(
        batch_size=cfg["batch-size"],
        epochs=cfg["epochs"],
        lr=cfg["clf-lr"],
        lr_final=cfg["clf-lr-final"],
        weight_decay=cfg["clf-weight-decay"],
        seed=cfg["seed"],
    )


def settings(cfg, **cleaner_overrides) -> PipelineSettings:
    method = cfg["loss"] if cfg["method"] == "cleaner" else cfg["method"]
    return PipelineSettings(
        method=method,
        mode=cfg["mode"],
        cleaner=cleaner_config(cfg, **cleaner_overrides),
        train=train_spec(cfg),
        temperature=cfg["temperature"],
        beta_weight=cfg["beta-weight"],
        workers=cfg["workers"],
    )
