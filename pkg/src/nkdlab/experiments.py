"""Experiment configuration, runners and CSV/JSON reports behind the CLI."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from datetime import datetime, timezone

import numpy as np

from .data import BlobSpec, blob_splits, read_csv, read_idx
from .losses import DEFAULT_STRATEGY, DistillConfig, WeightStrategy
from .models import ModelSpec, load_params, save_params
from .numerics import NKDError
from .training import (
    CE,
    NKD,
    LabelSmooth,
    TfNKD,
    TrainConfig,
    build_teacher_cache,
    easy_and_hard_samples,
    load_cache,
    mean_target_prob,
    metrics_csv,
    params_digest,
    save_cache,
    train,
)


class ConfigError(NKDError, ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "blobs"                 # blobs | idx | csv
    blob_classes: int = 10
    blob_dim: int = 20
    blob_train_per_class: int = 500
    blob_test_per_class: int = 100
    blob_center_scale: float = 1.0
    blob_noise_sigma: float = 1.6
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    # models
    teacher_hidden: tuple = (128, 128)
    student_hidden: tuple = (16,)
    # optimisation (student runs and teacher unless overridden)
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "step"
    milestones: tuple = (30, 45)
    gamma: float = 0.1
    weight_decay: float = 0.0
    topk: int = 5
    mixup: float = -1.0                    # < 0 disables
    mixup_beta: float = -1.0               # < 0 disables
    teacher_weight_decay: float = 5e-3
    teacher_seed: int = 1000
    alpha_ls: float = 0.0
    # distillation
    alpha: float = 1.5
    temperature: float = 1.0
    modes: tuple = ("nkd",)
    classical_lambda_sq: bool = False
    strategy: str = DEFAULT_STRATEGY.value
    sweep_strategies: bool = False
    trace_ids: tuple = ()                  # empty: pick one easy and one hard sample
    lambdas: tuple = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)
    # bookkeeping
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    teacher_checkpoint: str = ""
    workers: int = 1
    trials: int = 1000
    grad_instances: int = 100
    inject_bug: bool = False

    def teacher_path(self):
        return self.teacher_checkpoint or os.path.join(self.output_dir, "teacher.ckpt")

    def train_config(self, seed, teacher=False):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, schedule=self.schedule, milestones=self.milestones,
            gamma=self.gamma,
            weight_decay=self.teacher_weight_decay if teacher else self.weight_decay,
            seed=seed, topk=self.topk,
            mixup=None if self.mixup < 0 or teacher else self.mixup,
            mixup_beta=None if self.mixup_beta < 0 or teacher else self.mixup_beta,
        )

    def distill_config(self, mode, lam=None):
        base = dict(alpha=self.alpha, lam=self.temperature if lam is None else lam,
                    classical_lambda_sq=self.classical_lambda_sq)
        flags = MODES.get(mode)
        if flags is None:
            raise ConfigError(f"unknown distillation mode {mode!r}; choose from {sorted(MODES)}")
        return DistillConfig(**base, **flags)

    def snapshot(self):
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}


# Ablation columns: which terms are switched on for each distillation mode.
MODES = {
    "none": dict(use_soft=False, use_distributed=False),
    "classical": dict(use_soft=False, use_distributed=False, use_classical=True),
    "soft": dict(use_soft=True, use_distributed=False),
    "distributed": dict(use_soft=False, use_distributed=True),
    "nkd": dict(use_soft=True, use_distributed=True),
    "perfect": dict(use_soft=True, use_distributed=False, perfect_teacher=True),
}
ABLATION_MODES = ("none", "classical", "soft", "distributed", "nkd")


# ---------------------------------------------------------------- config parsing

def _field_types():
    return {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name, raw):
    f = _field_types()[name]
    default = f.default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            sample = default[0] if default else ""
            if name in ("teacher_hidden", "student_hidden", "milestones", "seeds", "trace_ids"):
                return tuple(int(x) for x in items)
            if name == "lambdas":
                return tuple(float(x) for x in items)
            return tuple(type(sample)(x) for x in items)
        return raw
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from None


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    known = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def build_config(config_path=None, overrides=None):
    values = {}
    if config_path:
        try:
            with open(config_path) as f:
                values.update(parse_config_text(f.read(), config_path))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    for key, raw in (overrides or {}).items():
        if key not in _field_types():
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg.dataset not in ("blobs", "idx", "csv"):
        raise ConfigError(f"dataset must be blobs, idx or csv, not {cfg.dataset!r}")
    if cfg.dataset == "idx" and not all([cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels]):
        raise ConfigError("idx datasets need train_images, train_labels, test_images and test_labels")
    if cfg.dataset == "csv" and not (cfg.train_csv and cfg.test_csv):
        raise ConfigError("csv datasets need train_csv and test_csv")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    if not cfg.lambdas:
        raise ConfigError("lambdas must not be empty")
    for m in cfg.modes:
        cfg.distill_config(m)
    try:
        WeightStrategy(cfg.strategy)
        cfg.train_config(0)
        cfg.distill_config(cfg.modes[0] if cfg.modes else "nkd")
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")


# ---------------------------------------------------------------- data & models

def load_datasets(cfg):
    if cfg.dataset == "blobs":
        spec = BlobSpec(cfg.blob_classes, cfg.blob_dim, cfg.blob_train_per_class,
                        cfg.blob_center_scale, cfg.blob_noise_sigma, cfg.data_seed)
        return blob_splits(spec, cfg.blob_test_per_class)
    if cfg.dataset == "idx":
        train_set = read_idx(cfg.train_images, cfg.train_labels)
        k = train_set.num_classes
        return train_set, read_idx(cfg.test_images, cfg.test_labels, k, id_offset=len(train_set))
    train_set = read_csv(cfg.train_csv)
    return train_set, read_csv(cfg.test_csv, train_set.num_classes, id_offset=len(train_set))


def model_specs(cfg, train_set):
    teacher = ModelSpec(train_set.dim, cfg.teacher_hidden, train_set.num_classes)
    student = ModelSpec(train_set.dim, cfg.student_hidden, train_set.num_classes)
    return teacher, student


# ---------------------------------------------------------------- reports

TERM_NAMES = ("ce", "label_smooth", "soft", "distributed", "kd", "tf_soft")
REPORT_COLUMNS = (["experiment", "seed", "n", "top1", "top1_std", "topk", "topk_std", "train_top1"]
                  + [f"loss_{t}" for t in TERM_NAMES])


@dataclass
class RunOutcome:
    label: str
    seed: int
    top1: float
    topk: float
    train_top1: float
    terms: dict
    runtime: float
    metrics_csv: str
    trace_csv: str | None = None
    trace_stability: dict | None = None


def _run_one(args):
    """Train one student; module-level so it pickles for process pools."""
    label, seed, spec, train_set, test_set, loss_fn, tcfg, trace_ids = args
    sums = {}
    last_epoch = [0]

    def collect(epoch, step, ids, out):
        if epoch != last_epoch[0]:
            sums.clear()
            last_epoch[0] = epoch
        for k, v in out.terms.items():
            s = sums.setdefault(k, [0.0, 0])
            s[0] += v * len(ids)
            s[1] += len(ids)

    start = time.perf_counter()
    res = train(spec, train_set, test_set, loss_fn, tcfg, trace_ids=trace_ids, on_batch=collect)
    runtime = time.perf_counter() - start
    fin, fin_train = res.final("test"), res.final("train")
    terms = {k: v[0] / v[1] for k, v in sums.items()}
    return RunOutcome(label, seed, fin.top1, fin.topk, fin_train.top1, terms, runtime,
                      metrics_csv(res.metrics), res.trace.to_csv() if res.trace else None,
                      res.trace.stability() if res.trace else None)


def run_jobs(jobs, workers=1):
    """Run jobs, in parallel when ``workers > 1``; results keep job order."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def aggregate(outcomes):
    """Per-seed rows followed by one mean/std row per experiment label."""
    rows = []
    labels = list(dict.fromkeys(o.label for o in outcomes))
    for o in outcomes:
        rows.append({"experiment": o.label, "seed": o.seed, "n": 1, "top1": o.top1,
                     "topk": o.topk, "train_top1": o.train_top1,
                     **{f"loss_{k}": v for k, v in o.terms.items()}})
    for label in labels:
        group = [o for o in outcomes if o.label == label]
        top1 = np.array([o.top1 for o in group])
        topk = np.array([o.topk for o in group])
        rows.append({"experiment": label, "seed": "mean", "n": len(group),
                     "top1": float(top1.mean()), "top1_std": float(top1.std()),
                     "topk": float(topk.mean()), "topk_std": float(topk.std()),
                     "train_top1": float(np.mean([o.train_top1 for o in group]))})
    return rows


def summary_rows(rows):
    return {r["experiment"]: r for r in rows if r["seed"] == "mean"}


def report_csv(rows, timestamp=None):
    buf = io.StringIO()
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    buf.write(f"# generated {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(cfg, name, rows, extra=None, runtime=None):
    """Write ``<name>.csv`` and ``<name>.json`` under the output directory."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    csv_path = os.path.join(cfg.output_dir, f"{name}.csv")
    with open(csv_path, "w") as f:
        f.write(report_csv(rows))
    payload = {"command": name, "config": cfg.snapshot(), "rows": rows}
    if runtime is not None:
        payload["runtime_seconds"] = runtime
    payload.update(extra or {})
    with open(os.path.join(cfg.output_dir, f"{name}.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return csv_path


def _write_metrics(cfg, outcome, prefix):
    path = os.path.join(cfg.output_dir, "metrics", f"{prefix}_{outcome.label}_seed{outcome.seed}.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write(outcome.metrics_csv)


# ---------------------------------------------------------------- experiments

def train_teacher(cfg, datasets=None):
    """Train the teacher (CE, or label-smoothed CE when ``alpha_ls > 0``) and cache its logits."""
    train_set, test_set = datasets or load_datasets(cfg)
    tspec, _ = model_specs(cfg, train_set)
    loss = LabelSmooth(cfg.alpha_ls) if cfg.alpha_ls > 0 else CE()
    start = time.perf_counter()
    res = train(tspec, train_set, test_set, loss, cfg.train_config(cfg.teacher_seed, teacher=True))
    runtime = time.perf_counter() - start
    cache = build_teacher_cache(res.params, train_set)
    path = cfg.teacher_path()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_params(res.params, path)
    save_cache(cache, path + ".cache")
    with open(os.path.join(cfg.output_dir, "teacher_metrics.csv"), "w") as f:
        f.write(metrics_csv(res.metrics))
    fin, fin_train = res.final("test"), res.final("train")
    row = {"experiment": "teacher", "seed": cfg.teacher_seed, "n": 1, "top1": fin.top1,
           "topk": fin.topk, "train_top1": fin_train.top1}
    extra = {"teacher_digest": cache.digest,
             "mean_teacher_target_prob": mean_target_prob(cache, train_set)}
    write_report(cfg, "train-teacher", [row], extra, runtime)
    return res, cache


def load_teacher(cfg, train_set):
    path = cfg.teacher_path()
    if not os.path.exists(path):
        raise ConfigError(f"teacher checkpoint {path!r} not found; run train-teacher first")
    tspec, _ = model_specs(cfg, train_set)
    params = load_params(path, tspec)
    digest = params_digest(params)
    cache_path = path + ".cache"
    if os.path.exists(cache_path):
        cache = load_cache(cache_path, expected_digest=digest)
        if cache.missing(train_set.sample_ids).size == 0:
            return params, cache
    cache = build_teacher_cache(params, train_set)
    save_cache(cache, cache_path)
    return params, cache


def baseline_jobs(cfg, datasets, label="baseline"):
    train_set, test_set = datasets
    _, sspec = model_specs(cfg, train_set)
    loss = LabelSmooth(cfg.alpha_ls) if cfg.alpha_ls > 0 else CE()
    return [(label, s, sspec, train_set, test_set, loss, cfg.train_config(s), None) for s in cfg.seeds]


def distill_jobs(cfg, datasets, cache, modes=None, lam=None, label_fmt="{mode}"):
    train_set, test_set = datasets
    _, sspec = model_specs(cfg, train_set)
    jobs = []
    for mode in modes or cfg.modes:
        loss = NKD(cache, cfg.distill_config(mode, lam))
        label = label_fmt.format(mode=mode, lam=lam)
        jobs += [(label, s, sspec, train_set, test_set, loss, cfg.train_config(s), None)
                 for s in cfg.seeds]
    return jobs


def tfnkd_jobs(cfg, datasets, strategies, trace_ids=None):
    train_set, test_set = datasets
    _, sspec = model_specs(cfg, train_set)
    jobs = []
    for strat in strategies:
        loss = TfNKD(WeightStrategy(strat))
        for i, s in enumerate(cfg.seeds):
            trace = trace_ids if i == 0 else None
            jobs.append((f"tfnkd_{WeightStrategy(strat).value}", s, sspec, train_set, test_set,
                         loss, cfg.train_config(s), trace))
    return jobs


def run_train_baseline(cfg):
    datasets = load_datasets(cfg)
    start = time.perf_counter()
    outcomes = run_jobs(baseline_jobs(cfg, datasets), cfg.workers)
    for o in outcomes:
        _write_metrics(cfg, o, "train-baseline")
    rows = aggregate(outcomes)
    write_report(cfg, "train-baseline", rows, runtime=time.perf_counter() - start)
    return rows


def run_distill(cfg):
    datasets = load_datasets(cfg)
    _, cache = load_teacher(cfg, datasets[0])
    start = time.perf_counter()
    outcomes = run_jobs(distill_jobs(cfg, datasets, cache), cfg.workers)
    for o in outcomes:
        _write_metrics(cfg, o, "distill")
    rows = aggregate(outcomes)
    extra = {"teacher_digest": cache.digest,
             "mean_teacher_target_prob": mean_target_prob(cache, datasets[0])}
    write_report(cfg, "distill", rows, extra, time.perf_counter() - start)
    return rows


def run_tfnkd(cfg):
    datasets = load_datasets(cfg)
    train_set = datasets[0]
    strategies = WeightStrategy.teacher_free() if cfg.sweep_strategies else [WeightStrategy(cfg.strategy)]
    if WeightStrategy.TEACHER in strategies:
        raise ConfigError("the teacher strategy is not available without a teacher")
    trace_ids = cfg.trace_ids or easy_and_hard_samples(train_set)
    start = time.perf_counter()
    outcomes = run_jobs(baseline_jobs(cfg, datasets) + tfnkd_jobs(cfg, datasets, strategies, trace_ids),
                        cfg.workers)
    trace_files, stability = {}, {}
    for o in outcomes:
        _write_metrics(cfg, o, "tfnkd")
        if o.trace_csv is not None:
            path = os.path.join(cfg.output_dir, f"trace_{o.label}.csv")
            with open(path, "w") as f:
                f.write(o.trace_csv)
            trace_files[o.label] = path
            stability[o.label] = {str(k): v for k, v in o.trace_stability.items()}
    rows = aggregate(outcomes)
    extra = {"trace_ids": [int(i) for i in trace_ids], "trace_files": trace_files,
             "trace_stability": stability}
    write_report(cfg, "tfnkd", rows, extra, time.perf_counter() - start)
    return rows


def run_sweep_temperature(cfg):
    if not cfg.lambdas:
        raise ConfigError("lambdas must not be empty")
    datasets = load_datasets(cfg)
    _, cache = load_teacher(cfg, datasets[0])
    start = time.perf_counter()
    jobs = []
    for lam in cfg.lambdas:
        jobs += distill_jobs(cfg, datasets, cache, modes=("nkd",), lam=lam, label_fmt="lambda={lam:g}")
    outcomes = run_jobs(jobs, cfg.workers)
    rows = aggregate(outcomes)
    best = max(summary_rows(rows).values(), key=lambda r: r["top1"])
    extra = {"best_lambda": best["experiment"], "best_top1": best["top1"]}
    write_report(cfg, "sweep-temp", rows, extra, time.perf_counter() - start)
    return rows, best
