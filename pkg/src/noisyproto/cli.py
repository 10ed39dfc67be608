"""Command-line pipeline: synth, clean, protos, train, eval, sweep, hist.

Every command resolves its configuration (flag > config file/manifest >
default), writes its artifacts under ``--out`` and finishes with an atomic
``<command>.manifest.json``.  Exit codes: 0 ok, 1 config error, 2 I/O error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import config as C
from .classifier import (
    CosineClassifier,
    init_from_prototypes,
    rank_classes,
    topk_accuracy,
    train_classifier,
)
from .dataio import (
    FeatureSet,
    TrialSpec,
    atomic_write_bytes,
    load_features,
    load_scores,
    sample_trial,
    save_features,
    save_scores,
    stack_queries,
    synthesize,
)
from .errors import (
    ConfigError,
    DegenerateLossError,
    DegeneratePrototypeError,
    FormatError,
    NumericError,
    ParameterError,
)
from .pipeline import build_prototypes, clean_classes, evaluate, roc_auc, run_trial, training_set
from .prototypes import assign_windows

log = logging.getLogger("noisyproto")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "clean", "protos", "train", "eval", "sweep", "hist")


# -- helpers -----------------------------------------------------------------


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths: Sequence[Path]) -> str:
    h = hashlib.sha1()
    for p in sorted(paths, key=lambda x: str(x)):
        h.update(f"{git_blob_hash(Path(p).read_bytes())} {Path(p).name}\n".encode())
    return h.hexdigest()


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def class_file(directory: Path, class_id: int, suffix: str) -> Path:
    return directory / f"class_{class_id:03d}{suffix}"


def load_dir(directory: Path) -> list[FeatureSet]:
    files = sorted(directory.glob("class_*.fnp"))
    if not files:
        raise FileNotFoundError(f"no class_*.fnp feature files in {directory}")
    return sorted((load_features(f) for f in files), key=lambda fs: fs.class_id)


class Run:
    """Per-invocation bookkeeping for the manifest."""

    def __init__(self, command: str, cfg: C.Resolved):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.data = Path(cfg["data"] or cfg["out"])
        self.timings: dict[str, float] = {}
        self.inputs: list[Path] = []
        self.metrics: dict = {}
        self._t0 = time.perf_counter()

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 6)

        return _Timer()

    @property
    def scores_path(self) -> Path:
        return Path(self.cfg["scores"]) if self.cfg["scores"] else self.out / "scores"

    def write_manifest(self):
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        cfg = self.cfg
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": cfg.record(),
            "seeds": {k: cfg[k] for k in ("seed", "synth-seed", "trial-seed")},
            "inputs_hash": content_hash(self.inputs) if self.inputs else None,
            "inputs": sorted(str(p) for p in self.inputs),
            "timings": self.timings,
            "metrics": self.metrics,
        }
        atomic_write_bytes(self.out / f"{self.command}.manifest.json", dump_json(manifest))


# -- commands ----------------------------------------------------------------


def cmd_synth(run: Run):
    with run.stage("synthesize"):
        data = synthesize(C.synth_spec(run.cfg))
    for split, sets in (("features", data.classes), ("test", data.test), ("val", data.val)):
        for fs in sets:
            save_features(fs, class_file(run.out / split, fs.class_id, ".fnp"))
    run.metrics = {"classes": len(data.classes), "files": 3 * len(data.classes)}


def _features(run: Run) -> list[FeatureSet]:
    d = run.data / "features"
    classes = load_dir(d)
    run.inputs += sorted(d.glob("class_*.fnp"))
    return classes


def _scores(run: Run, classes):
    d = run.scores_path
    out = []
    for fs in classes:
        p = class_file(d, fs.class_id, ".csv")
        r = load_scores(p)
        if r.values.size != fs.N or r.k != fs.k:
            raise ParameterError(f"{p}: scores do not match class {fs.class_id} (N={fs.N}, k={fs.k})")
        run.inputs.append(p)
        out.append(r)
    return out


def cmd_clean(run: Run):
    classes = _features(run)
    cfg = C.cleaner_config(run.cfg)
    with run.stage("clean"):
        results = clean_classes(classes, cfg, cfg.loss, run.cfg["workers"])
    for fs, res in zip(classes, results):
        save_scores(res.scores, class_file(run.scores_path, fs.class_id, ".csv"))
        atomic_write_bytes(class_file(run.out / "traces", fs.class_id, ".csv"), res.trace_csv().encode())
    run.metrics = {
        "loss": cfg.loss,
        "final_loss": {str(fs.class_id): res.trace[-1].loss for fs, res in zip(classes, results)},
    }
    if all(fs.planted is not None for fs in classes):
        run.metrics["auc"] = {
            str(fs.class_id): roc_auc(res.scores.noisy, fs.planted)
            for fs, res in zip(classes, results)
            if 0 < fs.planted.sum() < fs.n_noisy
        }


def cmd_protos(run: Run):
    classes = _features(run)
    scores = _scores(run, classes)
    T = run.cfg["groups"]
    with run.stage("prototypes"):
        protos = build_prototypes(classes, scores, T)
    for fs, p in zip(classes, protos):
        cols = np.column_stack([p.p_unified, p.p_clean, p.p_noise_global, p.window_protos])
        save_features(FeatureSet(cols, 3, fs.class_id), class_file(run.out / "protos", fs.class_id, ".fnp"))
        meta = {
            "columns": ["unified", "clean", "noise_global"] + [f"window_{t}" for t in range(T)],
            "normalizer": p.normalizer,
            "window_empty": [bool(x) for x in p.window_empty],
            "window_assignment": [int(x) for x in p.window_assignment],
        }
        atomic_write_bytes(class_file(run.out / "protos", fs.class_id, ".json"), dump_json(meta))
    run.metrics = {"classes": len(protos)}


def save_classifier(clf: CosineClassifier, directory: Path, history):
    save_features(FeatureSet(clf.W, clf.num_classes, 0), directory / "weights.fnp")
    meta = {"temperature": clf.s, "class_ids": [int(c) for c in clf.class_ids], "loss_history": history}
    atomic_write_bytes(directory / "meta.json", dump_json(meta))


def load_classifier(directory: Path) -> CosineClassifier:
    W = load_features(directory / "weights.fnp").V
    meta = json.loads((directory / "meta.json").read_text())
    return CosineClassifier(W, meta["temperature"], np.array(meta["class_ids"]))


def cmd_train(run: Run):
    classes = _features(run)
    scores = _scores(run, classes)
    with run.stage("prototypes"):
        protos = build_prototypes(classes, scores, run.cfg["groups"])
    clf = init_from_prototypes([p.p_unified for p in protos], [fs.class_id for fs in classes], run.cfg["temperature"])
    V, y, w = training_set(classes, scores)
    with run.stage("train"):
        clf, history = train_classifier(clf, V, y, w, C.train_spec(run.cfg))
    save_classifier(clf, run.out / "classifier", history)
    run.metrics = {"initial_loss": history[0], "final_loss": history[-1]}


def _queries(run: Run, split: str):
    d = run.data / split
    sets = load_dir(d)
    run.inputs += sorted(d.glob("class_*.fnp"))
    return stack_queries(sets)


def cmd_eval(run: Run):
    cfg = run.cfg
    if cfg["classifier"]:
        Q, y = _queries(run, "test")
        clf = load_classifier(Path(cfg["classifier"]))
        run.inputs += [Path(cfg["classifier"]) / "weights.fnp", Path(cfg["classifier"]) / "meta.json"]
        R = rank_classes(clf, Q)
        metrics = {"classifier": {"top1": topk_accuracy(R, y, 1), "top5": topk_accuracy(R, y, min(5, clf.num_classes))}}
    else:
        pool = _features(run)
        test = load_dir(run.data / "test")
        run.inputs += sorted((run.data / "test").glob("class_*.fnp"))
        s = C.settings(cfg)
        with run.stage("evaluate"):
            metrics = {
                "method": s.method,
                "mode": s.mode,
                "shots": evaluate(pool, test, cfg["shots"], cfg["trials"], cfg["trial-seed"], s),
            }
    atomic_write_bytes(run.out / "metrics.json", dump_json(metrics))
    run.metrics = metrics


def cmd_sweep(run: Run):
    cfg = run.cfg
    alphas, betas = cfg["sweep-alphas"], cfg["sweep-betas"]
    if not alphas or not betas:
        raise ConfigError("empty sweep grid")
    pool = _features(run)
    Q, y = _queries(run, "val")
    classes = sample_trial(pool, TrialSpec(cfg["shots"][0], 1, cfg["trial-seed"]), 0)
    ratio = cfg["alpha-low"] / cfg["alpha-high"] if cfg["alpha-high"] > 0 else 0.0
    rows = []
    with run.stage("sweep"):
        for a in alphas:
            for b in betas:
                s = C.settings(cfg, alpha_high=a, alpha_low=a * ratio, beta=b)
                m = run_trial(classes, Q, y, s)
                rows.append((a, b, m["top1"], m.get("top5", m["top1"])))
    # stable: ties keep grid order
    rows.sort(key=lambda r: (-r[3], -r[2]))
    lines = ["rank,alpha,beta,val_top1,val_top5"]
    lines += [f"{i},{a!r},{b!r},{t1!r},{t5!r}" for i, (a, b, t1, t5) in enumerate(rows)]
    atomic_write_bytes(run.out / "sweep.csv", ("\n".join(lines) + "\n").encode())
    best = rows[0]
    run.metrics = {"cells": len(rows), "best": {"alpha": best[0], "beta": best[1], "val_top1": best[2], "val_top5": best[3]}}


def histogram(noisy_r: np.ndarray, bins: int = 10):
    """Equal-width bins over [min, max] of the scores, last bin closed."""
    spec, assignment = assign_windows(noisy_r, bins)
    counts = np.bincount(assignment, minlength=bins)
    return [(lo, hi, int(c)) for (lo, hi), c in zip(spec.bounds(), counts)]


def cmd_hist(run: Run):
    src = run.scores_path
    files = sorted(src.glob("class_*.csv")) if src.is_dir() else [src]
    if not files or not files[0].exists():
        raise FileNotFoundError(f"no score files at {src}")
    counts = {}
    for f in files:
        r = load_scores(f)
        rows = histogram(r.noisy, run.cfg["bins"])
        lines = ["bin_lower,bin_upper,count"] + [f"{lo!r},{hi!r},{c}" for lo, hi, c in rows]
        atomic_write_bytes(run.out / "hist" / f.name, ("\n".join(lines) + "\n").encode())
        run.inputs.append(f)
        counts[f.stem] = [c for _, _, c in rows]
    run.metrics = {"counts": counts}


HANDLERS = {
    "synth": cmd_synth,
    "clean": cmd_clean,
    "protos": cmd_protos,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "hist": cmd_hist,
}


# -- argument handling -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisyproto", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--from-manifest", help="reuse the resolved config of a previous run")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, spec in C.KEYS.items():
            kwargs = {"dest": key.replace("-", "_"), "default": None, "help": spec.help}
            if spec.choices:
                kwargs["choices"] = spec.choices
            p.add_argument(f"--{key}", **kwargs)
    return parser


def resolve_args(args: argparse.Namespace) -> C.Resolved:
    flags = {key: getattr(args, key.replace("-", "_")) for key in C.KEYS}
    if args.config and args.from_manifest:
        raise ConfigError("--config and --from-manifest are mutually exclusive")
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        values = {C.normalize_key(k): v["value"] for k, v in manifest["config"].items()}
        unknown = set(values) - set(C.KEYS)
        if unknown:
            raise ConfigError(f"manifest has unknown keys: {sorted(unknown)}")
        # inputs stay where the recorded run found them, even if --out moves
        if not values.get("data"):
            values["data"] = values.get("out", "")
        return C.resolve(flags, values, "manifest")
    file_values = C.read_config_file(args.config) if args.config else {}
    return C.resolve(flags, file_values)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_args(args)
        run = Run(args.command, cfg)
        HANDLERS[args.command](run)
        run.write_manifest()
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DegeneratePrototypeError, DegenerateLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
