"""Config-driven experiments: baseline vs. proposed runs, sweeps, aggregation.

An experiment config is one JSON document::

    {
      "version": 1,
      "name": "blobs4",
      "dataset": {"synthetic": {"counts": [600, 150, 150, 100], "dim": 16,
                                "separation": 3.0, "noise": 1.0}},
      "split": {"train": 0.7, "val": 0.1, "test": 0.2, "p": 0.1, "seeds": [1, 2, 3]},
      "mode": "proposed-ssl",
      "train": {"K": 3, "lam": 10.0, "T": 2.0, "tau": 0.95, ...},
      "compare_single": true,
      "sweep": {"tau": [0.1, 0.9], "K": [1, 3], "lam": [0, 10], "p": [0.1], "T": [2]},
      "output_dir": "out"
    }

``dataset`` is either ``{"synthetic": {...}}`` (regenerated per seed) or
``{"manifest": "path.csv"}`` (fixed data, split per seed). ``train`` accepts
any :class:`TrainConfig` field except ``seed``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import SplitSpec, SyntheticSpec, generate_synthetic, load_dataset_with_meta, mask_labels, stratified_split
from .errors import ConfigurationError, TrainingDivergenceError
from .trainer import TrainConfig, evaluate, run_ssl

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
RESULT_SCHEMA = "kdssl-run/1"
MODES = ("baseline-fsl", "proposed-ssl")
SWEEP_AXES = ("tau", "K", "lam", "p", "T")
METRIC_KEYS = ("bacc", "acc", "acc_star", "macro_f1")
TABLE_COLUMNS = ("method", "p", "K", "lambda", "T", "tau", "BAcc", "Acc", "AccStar", "F1", "n_seeds")
METHOD_ORDER = ("Baseline", "Proposed (K=1)", "Proposed (KD)", "Proposed (K=k)")


def _fail(path: str, msg: str):
    raise ConfigurationError(f"{path}: {msg}")


def _number(d: dict, key: str, path: str, default=None, lo=None, hi=None, integer=False):
    v = d.get(key, default)
    if v is None:
        _fail(f"{path}.{key}", "required")
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not float(v).is_integer()):
        _fail(f"{path}.{key}", f"expected {'an integer' if integer else 'a number'}, got {v!r}")
    if not math.isfinite(v):
        _fail(f"{path}.{key}", "must be finite")
    if lo is not None and v < lo or hi is not None and v > hi:
        _fail(f"{path}.{key}", f"{v} outside [{lo}, {hi}]")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: dict
    split: SplitSpec
    p: float
    seeds: tuple
    mode: str
    train: TrainConfig
    compare_single: bool = True
    sweep: dict = field(default_factory=dict)
    output_dir: str = "out"
    base_dir: str = "."

    def canonical(self) -> dict:
        """Everything that influences results; the output location is excluded."""
        return {
            "version": CONFIG_VERSION,
            "name": self.name,
            "dataset": self.dataset,
            "split": {"train": self.split.train, "val": self.split.val, "test": self.split.test,
                      "p": self.p, "seeds": list(self.seeds)},
            "mode": self.mode,
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "compare_single": self.compare_single,
            "sweep": {k: list(v) for k, v in sorted(self.sweep.items())},
        }

    @property
    def config_hash(self) -> str:
        return config_hash(self.canonical())

    def points(self, use_sweep: bool) -> list:
        """Sweep points as dicts over ``SWEEP_AXES``; one point when sweeps are off."""
        base = {"tau": self.train.tau, "K": self.train.K, "lam": self.train.lam, "p": self.p, "T": self.train.T}
        if not use_sweep or not self.sweep:
            return [base]
        axes = [a for a in SWEEP_AXES if a in self.sweep]
        out = []
        for combo in itertools.product(*(self.sweep[a] for a in axes)):
            pt = dict(base)
            pt.update(zip(axes, combo))
            out.append(pt)
        return out


def config_hash(doc: dict) -> str:
    raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def parse_config(doc, base_dir: str = ".") -> ExperimentConfig:
    """Validate a config document; errors name the offending field path."""
    if not isinstance(doc, dict):
        _fail("config", "top level must be a JSON object")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        _fail("config.version", f"unsupported version {version!r}, expected {CONFIG_VERSION}")
    known = {"version", "name", "dataset", "split", "mode", "train", "compare_single", "sweep", "output_dir"}
    for key in doc:
        if key not in known:
            _fail(f"config.{key}", "unknown field")

    ds = doc.get("dataset")
    if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("synthetic", "manifest"):
        _fail("config.dataset", "expected {\"synthetic\": {...}} or {\"manifest\": \"path\"}")
    if "synthetic" in ds:
        syn = ds["synthetic"]
        if not isinstance(syn, dict):
            _fail("config.dataset.synthetic", "expected an object")
        counts = syn.get("counts")
        if not isinstance(counts, list) or len(counts) < 2 or not all(isinstance(c, int) and c >= 3 for c in counts):
            _fail("config.dataset.synthetic.counts", "need at least two integer class counts >= 3")
        dataset = {"synthetic": {
            "counts": list(counts),
            "dim": _number(syn, "dim", "config.dataset.synthetic", 16, lo=1, integer=True),
            "separation": _number(syn, "separation", "config.dataset.synthetic", 3.0, lo=0),
            "noise": _number(syn, "noise", "config.dataset.synthetic", 1.0, lo=0),
        }}
        try:
            SyntheticSpec(tuple(counts), dataset["synthetic"]["dim"], dataset["synthetic"]["separation"],
                          dataset["synthetic"]["noise"])
        except ConfigurationError as exc:
            _fail("config.dataset.synthetic", str(exc))
    else:
        if not isinstance(ds["manifest"], str) or not ds["manifest"]:
            _fail("config.dataset.manifest", "expected a file path")
        dataset = {"manifest": ds["manifest"]}

    sp = doc.get("split", {})
    if not isinstance(sp, dict):
        _fail("config.split", "expected an object")
    seeds = sp.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        _fail("config.split.seeds", "need a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        _fail("config.split.seeds", "duplicate seeds")
    try:
        split = SplitSpec(_number(sp, "train", "config.split", 0.7, lo=0, hi=1),
                          _number(sp, "val", "config.split", 0.1, lo=0, hi=1),
                          _number(sp, "test", "config.split", 0.2, lo=0, hi=1))
    except ConfigurationError as exc:
        _fail("config.split", str(exc))
    p = _number(sp, "p", "config.split", 1.0, lo=0, hi=1)
    if p <= 0:
        _fail("config.split.p", "labeled fraction must be > 0")

    mode = doc.get("mode", "proposed-ssl")
    if mode not in MODES:
        _fail("config.mode", f"expected one of {MODES}, got {mode!r}")

    tr = doc.get("train", {})
    if not isinstance(tr, dict):
        _fail("config.train", "expected an object")
    names = {f.name for f in fields(TrainConfig)} - {"seed"}
    for key in tr:
        if key not in names:
            _fail(f"config.train.{key}", "unknown field")
    try:
        train = TrainConfig.from_dict(tr)
    except (ConfigurationError, TypeError) as exc:
        _fail("config.train", str(exc))

    sweep = doc.get("sweep", {}) or {}
    if not isinstance(sweep, dict):
        _fail("config.sweep", "expected an object")
    clean = {}
    for axis, values in sweep.items():
        path = f"config.sweep.{axis}"
        if axis not in SWEEP_AXES:
            _fail(path, f"unknown axis, expected one of {SWEEP_AXES}")
        if not isinstance(values, list) or not values:
            _fail(path, "expected a non-empty list")
        vals = [_number({"v": v}, "v", path, integer=(axis == "K")) for v in values]
        for v in vals:
            try:
                if axis == "p" and not 0 < v <= 1:
                    raise ConfigurationError(f"p={v} outside (0, 1]")
                if axis != "p":
                    replace(train, **{axis: v})
            except ConfigurationError as exc:
                _fail(path, str(exc))
        clean[axis] = vals

    compare = doc.get("compare_single", True)
    if not isinstance(compare, bool):
        _fail("config.compare_single", "expected true or false")
    out_dir = doc.get("output_dir", "out")
    if not isinstance(out_dir, str):
        _fail("config.output_dir", "expected a string")
    return ExperimentConfig(name=str(doc.get("name", "experiment")), dataset=dataset, split=split, p=p,
                            seeds=tuple(seeds), mode=mode, train=train, compare_single=compare,
                            sweep=clean, output_dir=out_dir, base_dir=base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return parse_config(doc, base_dir=str(path.parent))


# -- running ------------------------------------------------------------------------------

def build_splits(cfg: ExperimentConfig, seed: int, p: float):
    """Dataset, stratified split and label masking for one seed."""
    if "synthetic" in cfg.dataset:
        s = cfg.dataset["synthetic"]
        data = generate_synthetic(SyntheticSpec(tuple(s["counts"]), s["dim"], s["separation"], s["noise"]), seed)
        C = len(s["counts"])
    else:
        path = Path(cfg.base_dir) / cfg.dataset["manifest"]
        data, meta = load_dataset_with_meta(path)
        C = meta["num_classes"]
        if any(e.label is None for e in data):
            raise ConfigurationError(f"{path}: experiment manifests must be fully labeled")
    train, val, test = stratified_split(data, replace(cfg.split, seed=seed), C)
    return mask_labels(train, p, seed, C), val, test


def member_mean(reports: list) -> dict:
    """Arithmetic mean of each scalar metric over the members' own reports."""
    return {k: float(np.mean([r[k] for r in reports])) for k in METRIC_KEYS}


def _train_one(cfg: ExperimentConfig, tcfg: TrainConfig, pools, val, test):
    result = run_ssl(tcfg, pools, val, test, stage2=(cfg.mode == "proposed-ssl"))
    y = np.array([e.label for e in test], dtype=np.int64)
    ev = evaluate(result.ensemble, result.eval_matrix(test), y)
    return result, ev


def run_point(cfg: ExperimentConfig, seed: int, point: dict) -> dict:
    """Train and evaluate one (seed, sweep point); returns the result document."""
    tcfg = replace(cfg.train, seed=seed, tau=point["tau"], K=int(point["K"]), lam=point["lam"], T=point["T"])
    pools, val, test = build_splits(cfg, seed, point["p"])
    result, ev = _train_one(cfg, tcfg, pools, val, test)
    members = [m.to_dict() for m in ev.members]
    metrics = {
        "ensemble": ev.ensemble.to_dict(),
        "members": members,
        "member_mean": member_mean(members),
    }
    if tcfg.K == 1:
        metrics["single"] = ev.ensemble.to_dict()
    elif cfg.compare_single:
        _, single = _train_one(cfg, replace(tcfg, K=1), pools, val, test)
        metrics["single"] = single.ensemble.to_dict()
    return {
        "schema": RESULT_SCHEMA,
        "status": "ok",
        "config_hash": cfg.config_hash,
        "name": cfg.name,
        "mode": cfg.mode,
        "seed": seed,
        "point": point,
        "sizes": {"labeled": len(pools.labeled), "unlabeled": len(pools.unlabeled),
                  "val": len(val), "test": len(test)},
        "metrics": metrics,
        "history": result.history,
        "audit": result.audit,
        "best_iteration": result.best_iteration,
    }


def run_filename(mode: str, seed: int, point: dict) -> str:
    return "{}_p{:g}_K{}_lam{:g}_T{:g}_tau{:g}_seed{}.json".format(
        mode, point["p"], int(point["K"]), point["lam"], point["T"], point["tau"], seed)


def dump_json(doc, path) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _execute(args) -> tuple:
    cfg, seed, point, runs_dir = args
    name = run_filename(cfg.mode, seed, point)
    start = time.perf_counter()
    try:
        doc = run_point(cfg, seed, point)
        code = 0
    except TrainingDivergenceError as exc:
        doc = {"schema": RESULT_SCHEMA, "status": "diverged", "error": str(exc), "config_hash": cfg.config_hash,
               "name": cfg.name, "mode": cfg.mode, "seed": seed, "point": point}
        code = 3
    dump_json(doc, os.path.join(runs_dir, name))
    timing = {"config_hash": cfg.config_hash, "seconds": time.perf_counter() - start}
    dump_json(timing, os.path.join(runs_dir, name[:-5] + ".timing.json"))
    return name, code


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None, use_sweep: bool = False,
                   threads: int = 1) -> int:
    """Run every (seed, point), write ``runs/*.json`` and the tables; return an exit code."""
    out = Path(out_dir or cfg.output_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, seed, pt, str(runs_dir)) for pt in cfg.points(use_sweep) for seed in cfg.seeds]
    log.info("%d runs, config %s", len(jobs), cfg.config_hash[:12])
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_execute, jobs))
    else:
        outcomes = [_execute(j) for j in jobs]
    for name, code in outcomes:
        if code:
            log.error("run %s diverged", name)
    diverged = any(code == 3 for _, code in outcomes)
    rep = report(out)
    if diverged:
        return 3
    return rep


# -- reporting ----------------------------------------------------------------------------

def mean_se(values) -> tuple:
    """Mean and standard error (sample std over sqrt(n)); se is 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _rows_for(doc: dict) -> list:
    """(method, metric dict) pairs contributed by one run document."""
    m = doc["metrics"]
    K = int(doc["point"]["K"])
    if doc["mode"] == "baseline-fsl":
        return [("Baseline", m["ensemble"])]
    rows = [("Proposed (K=k)", m["ensemble"])]
    if K > 1:
        rows.append(("Proposed (KD)", m["member_mean"]))
    if "single" in m:
        rows.append(("Proposed (K=1)", m["single"]))
    return rows


def _fmt(mean: float, se: float) -> str:
    return f"{100 * mean:.2f}±{100 * se:.2f}"


def collect_runs(out_dir) -> tuple:
    """Load run documents; returns ``(docs, problems)`` where problems are skipped files."""
    runs_dir = Path(out_dir) / "runs"
    files = sorted(f for f in runs_dir.glob("*.json") if not f.name.endswith(".timing.json")) \
        if runs_dir.is_dir() else []
    docs, problems = [], []
    for f in files:
        try:
            doc = json.loads(f.read_text(encoding="utf-8"))
            if doc.get("schema") != RESULT_SCHEMA:
                raise ValueError("unknown schema")
            if doc.get("status") != "ok":
                raise ValueError(f"status {doc.get('status')!r}")
            _rows_for(doc)
            docs.append(doc)
        except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
            problems.append(f"{f.name}: {exc}")
    return docs, problems


def aggregate(docs: list) -> list:
    """Group per-seed metrics by (method, p, K, lambda, T, tau); mean ± se over seeds."""
    groups = {}
    for doc in docs:
        pt = doc["point"]
        for method, metrics in _rows_for(doc):
            K = 1 if method == "Proposed (K=1)" else int(pt["K"])
            key = (method, float(pt["p"]), K, float(pt["lam"]), float(pt["T"]), float(pt["tau"]))
            groups.setdefault(key, {}).setdefault(doc["seed"], metrics)
    rows = []
    for key, by_seed in groups.items():
        stats = {k: mean_se([by_seed[s][k] for s in sorted(by_seed)]) for k in METRIC_KEYS}
        rows.append({"key": key, "n": len(by_seed), "stats": stats})
    rows.sort(key=lambda r: (METHOD_ORDER.index(r["key"][0]),) + r["key"][1:])
    return rows


def _method_label(method: str, K: int) -> str:
    return f"Proposed (K={K})" if method == "Proposed (K=k)" else method


def write_tables(rows: list, tables_dir: Path) -> list:
    import csv

    tables_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with open(tables_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            method, p, K, lam, T, tau = r["key"]
            s = r["stats"]
            w.writerow([_method_label(method, K), f"{p:g}", K, f"{lam:g}", f"{T:g}", f"{tau:g}",
                        _fmt(*s["bacc"]), _fmt(*s["acc"]), _fmt(*s["acc_star"]), _fmt(*s["macro_f1"]), r["n"]])
    written.append(tables_dir / "summary.csv")
    # Plot data: one file per axis that takes more than one value, x/y per method and fixed setting.
    axis_pos = {"p": 1, "K": 2, "lambda": 3, "T": 4, "tau": 5}
    for axis, pos in axis_pos.items():
        if len({r["key"][pos] for r in rows if r["key"][0] == "Proposed (K=k)"}) < 2:
            continue
        path = tables_dir / f"plot_{axis}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "x", "bacc", "bacc_se", "acc", "macro_f1"])
            series = {}
            for r in rows:
                method = r["key"][0]
                if axis == "K" and method != "Proposed (K=k)":
                    continue
                fixed = [f"{name}={r['key'][i]:g}" for name, i in axis_pos.items() if i != pos]
                label = method if axis == "K" else _method_label(method, r["key"][2])
                series.setdefault(" ".join([label] + fixed), []).append(r)
            for name in sorted(series):
                for r in sorted(series[name], key=lambda r: r["key"][pos]):
                    s = r["stats"]
                    w.writerow([name, f"{r['key'][pos]:g}", f"{s['bacc'][0]:.6f}", f"{s['bacc'][1]:.6f}",
                                f"{s['acc'][0]:.6f}", f"{s['macro_f1'][0]:.6f}"])
        written.append(path)
    return written


def report(out_dir) -> int:
    """Aggregate ``<out>/runs`` into ``<out>/tables``; returns 0, or 4 when files were skipped."""
    out = Path(out_dir)
    docs, problems = collect_runs(out)
    for msg in problems:
        log.warning("skipping %s", msg)
    if not docs:
        raise ConfigurationError(f"{out}: no completed runs to report")
    write_tables(aggregate(docs), out / "tables")
    return 4 if problems else 0

