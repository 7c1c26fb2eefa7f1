"""Mini-batch SGD training with pluggable losses, teacher-logit caching and
per-sample weight tracing for the teacher-free loss."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import batches, mixup
from .losses import (
    DEFAULT_STRATEGY,
    DistillConfig,
    LabelBatch,
    WeightStrategy,
    ce_loss,
    label_smooth_ce,
    nkd_loss,
    smooth_weight,
    tfnkd_loss,
)
from .models import forward, backward, init_params, params_to_bytes, predict_logits
from .numerics import InvalidInputError, InvalidParameterError, NKDError, make_rng, softmax_temp

CACHE_MAGIC = b"NKDC"
CACHE_VERSION = 1


class NumericalError(NKDError, FloatingPointError):
    """Non-finite loss or gradient; ``dump`` holds the offending batch."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class IncompleteCacheError(NKDError, KeyError):
    def __init__(self, missing):
        self.missing = sorted(int(m) for m in missing)
        shown = ", ".join(map(str, self.missing[:20]))
        more = "" if len(self.missing) <= 20 else f" (+{len(self.missing) - 20} more)"
        super().__init__(f"teacher cache lacks {len(self.missing)} sample ids: {shown}{more}")

    def __str__(self):
        return self.args[0]


class CacheDigestError(NKDError, ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "step"          # constant | step | cosine
    milestones: tuple = (30, 45)
    gamma: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    topk: int = 5
    mixup: float | None = None      # fixed mixing coefficient
    mixup_beta: float | None = None  # or Beta(a, a) per batch

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.lr > 0:
            raise InvalidParameterError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidParameterError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidParameterError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be at least 1")
        if self.schedule not in ("constant", "step", "cosine"):
            raise InvalidParameterError(f"unknown lr schedule {self.schedule!r}")
        if self.mixup is not None and not 0 <= self.mixup <= 1:
            raise InvalidParameterError("mixup coefficient must lie in [0, 1]")

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch index."""
        if self.schedule == "step":
            return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / max(self.epochs, 1)))
        return self.lr


@dataclass
class SGDState:
    velocity: list


def sgd_init(params):
    return SGDState([np.zeros_like(w) for w in params.weights] +
                    [np.zeros_like(b) for b in params.biases])


def sgd_step(params, grads, state, lr, momentum=0.0, weight_decay=0.0):
    """Heavy-ball step: ``v = m*v + g (+ wd*p)``, ``p -= lr*v``. Returns new (params, state).

    Weight decay is applied to weights only, not biases.
    """
    gw, gb = grads
    n = len(params.weights)
    for g in (*gw, *gb):
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    new_v, new_w, new_b = [], [], []
    for i, (p, g) in enumerate(zip(params.weights + params.biases, list(gw) + list(gb))):
        if weight_decay and i < n:
            g = g + weight_decay * p
        v = momentum * state.velocity[i] + g
        new_v.append(v)
        (new_w if i < n else new_b).append(p - lr * v)
    out = type(params)(new_w, new_b, params.version + 1)
    return out, SGDState(new_v)


# ---------------------------------------------------------------- teacher cache

@dataclass(frozen=True)
class TeacherCache:
    sample_ids: np.ndarray   # sorted ascending
    logits: np.ndarray
    digest: str              # sha256 hex of the teacher checkpoint bytes

    def __post_init__(self):
        order = np.argsort(self.sample_ids, kind="stable")
        ids = np.ascontiguousarray(self.sample_ids[order], dtype=np.int64)
        logits = np.ascontiguousarray(self.logits[order], dtype=np.float64)
        ids.setflags(write=False)
        logits.setflags(write=False)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "logits", logits)

    def __len__(self):
        return self.sample_ids.size

    def missing(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return ids[~np.isin(ids, self.sample_ids)]

    def lookup(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.sample_ids, ids)
        pos = np.minimum(pos, len(self) - 1)
        bad = self.sample_ids[pos] != ids
        if np.any(bad):
            raise IncompleteCacheError(ids[bad])
        return self.logits[pos]


def params_digest(params):
    return hashlib.sha256(params_to_bytes(params)).hexdigest()


def build_teacher_cache(teacher_params, dataset):
    return TeacherCache(dataset.sample_ids.copy(),
                        predict_logits(teacher_params, dataset.inputs),
                        params_digest(teacher_params))


def cache_to_bytes(cache):
    n, c = cache.logits.shape
    head = CACHE_MAGIC + struct.pack("<I", CACHE_VERSION) + bytes.fromhex(cache.digest)
    head += struct.pack("<QI", n, c)
    rows = np.zeros(n, dtype=np.dtype([("id", "<i8"), ("logits", "<f8", (c,))]))
    rows["id"] = cache.sample_ids
    rows["logits"] = cache.logits
    return head + rows.tobytes()


def cache_from_bytes(buf, expected_digest=None):
    if buf[:4] != CACHE_MAGIC:
        raise CacheDigestError("not a teacher cache file (bad magic at offset 0)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CACHE_VERSION:
        raise CacheDigestError(f"unsupported cache version {version}")
    digest = buf[8:40].hex()
    n, c = struct.unpack_from("<QI", buf, 40)
    dt = np.dtype([("id", "<i8"), ("logits", "<f8", (c,))])
    if len(buf) != 52 + n * dt.itemsize:
        raise CacheDigestError(f"cache body size mismatch: {len(buf) - 52} bytes for {n} rows")
    rows = np.frombuffer(buf, dt, n, 52)
    if expected_digest is not None and digest != expected_digest:
        raise CacheDigestError(f"cache built from teacher {digest[:12]}, expected {expected_digest[:12]}")
    return TeacherCache(rows["id"].astype(np.int64), rows["logits"].astype(np.float64), digest)


def save_cache(cache, path):
    with open(path, "wb") as f:
        f.write(cache_to_bytes(cache))


def load_cache(path, expected_digest=None):
    with open(path, "rb") as f:
        return cache_from_bytes(f.read(), expected_digest)


# ---------------------------------------------------------------- loss selectors

@dataclass(frozen=True)
class CE:
    name = "ce"

    def __call__(self, logits, labels, ids):
        return ce_loss(logits, labels)


@dataclass(frozen=True)
class LabelSmooth:
    alpha_ls: float = 0.1
    name = "label_smooth"

    def __call__(self, logits, labels, ids):
        return label_smooth_ce(logits, labels, self.alpha_ls)


@dataclass(frozen=True)
class NKD:
    cache: TeacherCache
    config: DistillConfig = field(default_factory=DistillConfig)
    name = "nkd"

    def __call__(self, logits, labels, ids):
        return nkd_loss(logits, self.cache.lookup(ids), labels, self.config)


@dataclass(frozen=True)
class TfNKD:
    strategy: WeightStrategy = DEFAULT_STRATEGY
    name = "tfnkd"

    def __post_init__(self):
        object.__setattr__(self, "strategy", WeightStrategy(self.strategy))
        if self.strategy is WeightStrategy.TEACHER:
            raise InvalidParameterError("teacher-free training cannot use the teacher strategy")

    def __call__(self, logits, labels, ids):
        return tfnkd_loss(logits, labels, self.strategy)


# ---------------------------------------------------------------- metrics & trace

@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    split: str
    top1: float
    topk: float
    mean_loss: float
    clamp_events: int = 0


METRIC_COLUMNS = ["epoch", "split", "top1", "topk", "mean_loss", "clamp_events"]


def topk_accuracy(logits, targets, k):
    k = min(k, logits.shape[1])
    # stable sort keeps lower indices first among ties
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = float(np.mean(order[:, 0] == targets))
    topk = float(np.mean((order[:, :k] == targets[:, None]).any(axis=1)))
    return top1, topk


def evaluate(params, dataset, k=5):
    logits = predict_logits(params, dataset.inputs)
    top1, topk = topk_accuracy(logits, dataset.targets, k)
    return top1, topk, ce_loss(logits, dataset.labels).loss


def metrics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow([r.epoch, r.split, repr(r.top1), repr(r.topk), repr(r.mean_loss), r.clamp_events])
    return buf.getvalue()


TRACE_STRATEGIES = WeightStrategy.teacher_free()
TRACE_COLUMNS = (["epoch", "sample_id", "s_t", "v_t", "batch_mean_s_t", "batch_size"]
                 + [f"w_{s.value}" for s in TRACE_STRATEGIES])


@dataclass
class WeightTrace:
    """Per-epoch record of tracked samples' ``S_t`` and every smoothing weight.

    Values are taken from the forward pass of the batch containing the
    sample, before that batch's update. Epoch 0 holds the untrained model
    evaluated on the first epoch's batches.
    """

    tracked_ids: tuple
    rows: list = field(default_factory=list)

    def record(self, epoch, ids, s_t, labels):
        hit = np.isin(ids, self.tracked_ids)
        if not np.any(hit):
            return
        weights = {s: smooth_weight(s_t, labels, s)[0] for s in TRACE_STRATEGIES}
        v_t = labels.target_value
        mean = float(s_t.mean())
        for j in np.flatnonzero(hit):
            row = {"epoch": epoch, "sample_id": int(ids[j]), "s_t": float(s_t[j]),
                   "v_t": float(v_t[j]), "batch_mean_s_t": mean, "batch_size": len(ids)}
            for s in TRACE_STRATEGIES:
                row[f"w_{s.value}"] = float(weights[s][j])
            self.rows.append(row)

    def series(self, sample_id, column="s_t"):
        return np.array([r[column] for r in self.rows if r["sample_id"] == sample_id])

    def stability(self):
        """Across-epoch standard deviation of ``S_t`` and each weight, per sample."""
        cols = ["s_t"] + [f"w_{s.value}" for s in TRACE_STRATEGIES]
        return {sid: {c: float(self.series(sid, c).std()) for c in cols} for sid in self.tracked_ids}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], int) else repr(r[c]) for c in TRACE_COLUMNS])
        return buf.getvalue()


def easy_and_hard_samples(dataset):
    """Pick the sample nearest its class mean (easy) and the one closest to
    another class's mean relative to its own (hard)."""
    y = dataset.targets
    means = np.stack([dataset.inputs[y == c].mean(axis=0) for c in range(dataset.num_classes)])
    d = np.linalg.norm(dataset.inputs[:, None, :] - means[None], axis=2)
    own = d[np.arange(len(y)), y]
    d[np.arange(len(y)), y] = np.inf
    margin = own / d.min(axis=1)
    return int(dataset.sample_ids[np.argmin(margin)]), int(dataset.sample_ids[np.argmax(margin)])


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    params: object
    metrics: list
    trace: WeightTrace | None = None

    def final(self, split="test"):
        return [m for m in self.metrics if m.split == split][-1]


def _epoch_seed(seed, epoch):
    return int(make_rng(seed, "epoch", epoch).integers(0, 2**63 - 1))


def _mix_batch(x, labels, ids, config, epoch, step):
    rng = make_rng(config.seed, "mixup", epoch, step)
    lam = config.mixup if config.mixup is not None else float(rng.beta(config.mixup_beta, config.mixup_beta))
    perm = rng.permutation(len(ids))
    return mixup((x, labels), (x[perm], labels[perm]), lam)


def train(spec, train_set, test_set, loss_fn, config, trace_ids=None, init=None, on_batch=None):
    """Train a fresh model (or ``init``) and return params, metrics and optional trace.

    ``on_batch(epoch, step, ids, out)`` is called with every batch's
    :class:`LossOutput` before the update.
    """
    if isinstance(loss_fn, NKD):
        missing = loss_fn.cache.missing(train_set.sample_ids)
        if missing.size:
            raise IncompleteCacheError(missing)
        if config.mixup is not None or config.mixup_beta is not None:
            raise InvalidParameterError("mixup cannot be combined with cached teacher logits")
        digest_before = loss_fn.cache.digest
    if trace_ids is not None:
        unknown = set(map(int, trace_ids)) - set(map(int, train_set.sample_ids))
        if unknown:
            raise InvalidInputError(f"unknown tracked sample ids: {sorted(unknown)}")

    params = init.copy() if init is not None else init_params(spec, make_rng(config.seed, "init"))
    state = sgd_init(params)
    trace = WeightTrace(tuple(int(i) for i in trace_ids)) if trace_ids is not None else None
    k = config.topk
    use_mixup = config.mixup is not None or config.mixup_beta is not None

    metrics = []
    top1, topk, loss = evaluate(params, train_set, k)
    metrics.append(MetricsRecord(0, "train", top1, topk, loss))
    if test_set is not None:
        metrics.append(MetricsRecord(0, "test", *evaluate(params, test_set, k)))

    if trace is not None:
        # epoch 0: the untrained model on the batches of the first epoch
        for x, labels, ids in batches(train_set, config.batch_size, _epoch_seed(config.seed, 0)):
            if np.any(np.isin(ids, trace.tracked_ids)):
                logits = forward(params, x)[0]
                trace.record(0, ids, softmax_temp(logits)[np.arange(len(ids)), labels.target_index], labels)

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total, seen, clamps = 0.0, 0, 0
        for step, (x, labels, ids) in enumerate(
                batches(train_set, config.batch_size, _epoch_seed(config.seed, epoch))):
            if use_mixup:
                x, labels = _mix_batch(x, labels, ids, config, epoch, step)
            logits, cache = forward(params, x)
            out = loss_fn(logits, labels, ids) if np.all(np.isfinite(logits)) else None
            if out is None or not (np.isfinite(out.loss) and np.all(np.isfinite(out.grad))):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, step {step}",
                    {"inputs": x, "labels": labels.values, "sample_ids": ids, "logits": logits})
            if trace is not None:
                s_t = softmax_temp(logits)[np.arange(len(ids)), labels.target_index]
                trace.record(epoch + 1, ids, s_t, labels)
            if on_batch is not None:
                on_batch(epoch + 1, step, ids, out)
            grads = backward(params, cache, out.grad)
            params, state = sgd_step(params, grads, state, lr, config.momentum, config.weight_decay)
            total += out.loss * len(ids)
            seen += len(ids)
            clamps += out.clamp_events
        top1, topk, _ = evaluate(params, train_set, k)
        metrics.append(MetricsRecord(epoch + 1, "train", top1, topk, total / seen, clamps))
        if test_set is not None:
            metrics.append(MetricsRecord(epoch + 1, "test", *evaluate(params, test_set, k)))

    if isinstance(loss_fn, NKD) and loss_fn.cache.digest != digest_before:
        raise RuntimeError("teacher cache changed during distillation")
    return TrainResult(params, metrics, trace)


def mean_target_prob(cache, dataset):
    """Mean teacher probability of the labelled class over ``dataset``."""
    logits = cache.lookup(dataset.sample_ids)
    p = softmax_temp(logits)
    return float(p[np.arange(len(dataset)), dataset.targets].mean())
