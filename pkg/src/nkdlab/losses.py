"""Classification and distillation losses with analytic gradients.

Every loss takes raw student logits (B x C) and returns a :class:`LossOutput`
holding the batch-mean loss and its gradient with respect to those logits.
Teacher quantities are treated as constants.

Notation used in comments: ``S``/``T`` are student/teacher probabilities,
``t`` the target index of each row, ``V`` the label distribution and ``lam``
the softmax temperature.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DimensionError,
    InvalidInputError,
    InvalidParameterError,
    as_column,
    as_matrix,
    log_softmax_temp,
    softmax_temp,
)

EPS = 1e-12


@dataclass(frozen=True)
class LabelBatch:
    """Label distributions, one row per sample.

    ``target_index`` is the argmax of each row (lowest index on ties).
    """

    values: np.ndarray

    def __post_init__(self):
        v = as_matrix(self.values, "labels")
        if np.any(v < 0) or np.any(v > 1):
            raise InvalidInputError("label masses must lie in [0, 1]")
        sums = v.sum(axis=1)
        if not np.allclose(sums, 1.0, rtol=0, atol=1e-12):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise InvalidInputError(f"label row {bad} sums to {sums[bad]!r}, expected 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_indices(cls, indices, num_classes):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
            raise InvalidInputError(f"class index out of range [0, {num_classes})")
        v = np.zeros((idx.size, num_classes))
        v[np.arange(idx.size), idx] = 1.0
        return cls(v)

    @property
    def target_index(self):
        return np.argmax(self.values, axis=1)

    @property
    def target_value(self):
        """``V_t`` for every row."""
        return self.values[np.arange(len(self)), self.target_index]

    @property
    def num_classes(self):
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, rows):
        return LabelBatch(self.values[rows])


@dataclass(frozen=True)
class DistillConfig:
    """Balance ``alpha`` and temperature ``lam`` plus ablation switches.

    ``use_classical`` adds the cross-entropy KD term instead of the
    soft/distributed pair. ``perfect_teacher`` replaces the teacher target
    probability by 1 in the soft term.
    """

    alpha: float = 1.5
    lam: float = 1.0
    use_soft: bool = True
    use_distributed: bool = True
    use_classical: bool = False
    perfect_teacher: bool = False
    classical_lambda_sq: bool = False

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidParameterError(f"alpha must be nonnegative, got {self.alpha}")
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise InvalidParameterError(f"temperature must be positive, got {self.lam}")


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray
    clamp_events: int = 0
    terms: dict = field(default_factory=dict)
    degenerate: bool = False

    def __add__(self, other):
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0.0) + v
        return LossOutput(
            self.loss + other.loss,
            self.grad + other.grad,
            self.clamp_events + other.clamp_events,
            terms,
            self.degenerate or other.degenerate,
        )

    def scaled(self, factor):
        return LossOutput(
            factor * self.loss,
            factor * self.grad,
            self.clamp_events,
            {k: factor * v for k, v in self.terms.items()},
            self.degenerate,
        )


class WeightStrategy(str, enum.Enum):
    """Ways to turn the student's target probability into a soft-target weight."""

    RAW = "raw"                           # S_t
    ST_PLUS_VT_MINUS_MEAN = "st_plus_vt_minus_mean"   # S_t + V_t - mean(S_t)
    BATCH_SOFTMAX_TIMES_SUM = "batch_softmax_times_sum"  # softmax(S_t) * sum(V_t)
    SQRT_ST_MINUS_MIN = "sqrt_st_minus_min"  # sqrt(S_t - min(S_t))
    ST_OVER_MAX = "st_over_max"           # S_t / max(S_t)
    ST_OVER_MEAN = "st_over_mean"         # S_t / mean(S_t)
    TEACHER = "teacher"                   # T_t, needs a teacher

    @classmethod
    def teacher_free(cls):
        return [s for s in cls if s is not cls.TEACHER]


DEFAULT_STRATEGY = WeightStrategy.ST_PLUS_VT_MINUS_MEAN


def _check_pair(student, other, what="teacher logits"):
    s = as_matrix(student, "student logits")
    o = as_matrix(other, what)
    if s.shape != o.shape:
        raise DimensionError(f"student logits {s.shape} vs {what} {o.shape}")
    return s, o


def _labels_for(labels, logits):
    if not isinstance(labels, LabelBatch):
        labels = LabelBatch(labels)
    if labels.values.shape != logits.shape:
        raise DimensionError(f"labels {labels.values.shape} vs logits {logits.shape}")
    return labels


def _targets(t, batch, num_classes):
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if t.size != batch:
        raise DimensionError(f"{t.size} target indices for a batch of {batch}")
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise InvalidInputError(f"target index out of range [0, {num_classes})")
    return t


def _one_hot(t, num_classes):
    e = np.zeros((t.size, num_classes))
    e[np.arange(t.size), t] = 1.0
    return e


def _check_alpha_ls(alpha_ls):
    if not (0.0 <= alpha_ls < 1.0):
        raise InvalidParameterError(f"alpha_ls must lie in [0, 1), got {alpha_ls}")


def ce_loss(student_logits, labels):
    """Cross-entropy against (possibly soft) label rows at temperature 1."""
    z = as_matrix(student_logits, "student logits")
    labels = _labels_for(labels, z)
    b = z.shape[0]
    log_s = log_softmax_temp(z, 1.0)
    loss = float(-(labels.values * log_s).sum() / b)
    grad = (np.exp(log_s) - labels.values) / b
    return LossOutput(loss, grad, terms={"ce": loss})


def smoothed_labels(labels, alpha_ls):
    """One-hot rows -> ``alpha_ls/C`` off target, ``1 - alpha_ls*(C-1)/C`` on target."""
    _check_alpha_ls(alpha_ls)
    if not isinstance(labels, LabelBatch):
        labels = LabelBatch(labels)
    c = labels.num_classes
    t = labels.target_index
    if not np.all(labels.target_value == 1.0):
        raise InvalidInputError("label smoothing expects one-hot labels")
    v = np.full(labels.values.shape, alpha_ls / c)
    v[np.arange(len(labels)), t] = 1.0 - alpha_ls * (c - 1) / c
    return LabelBatch(v)


def label_smooth_ce(student_logits, labels, alpha_ls):
    z = as_matrix(student_logits, "student logits")
    labels = _labels_for(labels, z)
    out = ce_loss(z, smoothed_labels(labels, alpha_ls))
    out.terms = {"label_smooth": out.loss}
    return out


def ls_decomposed(student_logits, t, alpha_ls):
    """Label-smoothed CE written as target CE plus a non-target ratio term.

    ``-(alpha_ls/C) * sum_{i != t} log(S_i/S_t) - log S_t``, batch mean.
    """
    _check_alpha_ls(alpha_ls)
    z = as_matrix(student_logits, "student logits")
    b, c = z.shape
    t = _targets(t, b, c)
    log_s = log_softmax_temp(z, 1.0)
    log_st = log_s[np.arange(b), t]
    ratios = log_s - log_st[:, None]  # zero at the target column
    per_row = -(alpha_ls / c) * ratios.sum(axis=1) - log_st
    return float(per_row.mean())


def kd_classical(student_logits, teacher_logits, lam=1.0, lambda_sq=False):
    """``-sum_i T_i^lam log S_i^lam``; optionally scaled by ``lam**2``."""
    s, tz = _check_pair(student_logits, teacher_logits)
    b = s.shape[0]
    log_s = log_softmax_temp(s, lam)
    tp = softmax_temp(tz, lam)
    loss = float(-(tp * log_s).sum() / b)
    grad = (np.exp(log_s) - tp) / (lam * b)
    out = LossOutput(loss, grad, terms={"kd": loss})
    return out.scaled(lam * lam) if lambda_sq else out


def kd_decomposed(student_logits, teacher_logits, lam, t):
    """Classical KD rewritten as ``-log S_t^lam - sum_{i != t} T_i^lam log(S_i^lam/S_t^lam)``."""
    s, tz = _check_pair(student_logits, teacher_logits)
    b, c = s.shape
    t = _targets(t, b, c)
    log_s = log_softmax_temp(s, lam)
    tp = softmax_temp(tz, lam)
    rows = np.arange(b)
    log_st = log_s[rows, t]
    ratios = log_s - log_st[:, None]
    nontarget = tp * ratios
    nontarget[rows, t] = 0.0
    per_row = -log_st - nontarget.sum(axis=1)
    return float(per_row.mean())


def nontarget_distributions(student_logits, teacher_logits, lam, t):
    """Renormalised non-target distributions ``(T_hat, S_hat)``.

    Both are zero at the target column. ``S_i / (1 - S_t)`` equals a softmax
    over the non-target logits alone, which is how they are computed here;
    this never forms ``1 - S_t`` and so cannot cancel catastrophically.
    """
    s, tz = _check_pair(student_logits, teacher_logits)
    b, c = s.shape
    t = _targets(t, b, c)
    return _masked_softmax(tz, lam, t), _masked_softmax(s, lam, t)


def _masked_log_softmax(z, lam, t):
    z = z / lam
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, t] = -np.inf
    m = masked.max(axis=1, keepdims=True)
    out = masked - m - np.log(np.exp(masked - m).sum(axis=1, keepdims=True))
    out[rows, t] = 0.0
    return out


def _masked_softmax(z, lam, t):
    p = np.exp(_masked_log_softmax(z, lam, t))
    p[np.arange(z.shape[0]), t] = 0.0
    return p


def distributed_loss(student_logits, teacher_logits, lam, t):
    """Cross-entropy between renormalised teacher and student non-target distributions.

    Rows whose teacher is (numerically) one-hot at temperature ``lam``
    carry no non-target information; they contribute zero loss and zero
    gradient, are counted in ``clamp_events`` and set ``degenerate``.
    """
    s, tz = _check_pair(student_logits, teacher_logits)
    b, c = s.shape
    if c < 2:
        raise InvalidInputError("distributed loss needs at least two classes")
    t = _targets(t, b, c)
    rows = np.arange(b)

    t_target = softmax_temp(tz, lam)[rows, t]
    live = t_target < 1.0 - EPS
    n_dead = int(b - live.sum())

    t_hat = _masked_softmax(tz, lam, t)
    log_s_hat = _masked_log_softmax(s, lam, t)
    per_row = -(t_hat * log_s_hat).sum(axis=1) * live
    loss = float(per_row.sum() / b)

    # d/dz_k = (S_hat_k - T_hat_k) / lam for k != t; the target logit drops out
    grad = (np.exp(log_s_hat) - t_hat) / (lam * b)
    grad[rows, t] = 0.0
    grad *= live[:, None]
    return LossOutput(loss, grad, clamp_events=n_dead,
                      terms={"distributed": loss}, degenerate=n_dead > 0)


def soft_loss(student_logits, teacher_target_probs, t):
    """``-T_t log S_t`` with ``T_t`` a per-sample constant weight."""
    z = as_matrix(student_logits, "student logits")
    b, c = z.shape
    t = _targets(t, b, c)
    w = as_column(teacher_target_probs, "teacher target probs")
    if w.size != b:
        raise DimensionError(f"{w.size} target weights for a batch of {b}")
    if np.any(w < 0) or np.any(w > 1):
        raise InvalidParameterError("teacher target probabilities must lie in [0, 1]")
    return _weighted_target_ce(z, w, t, "soft")


def _weighted_target_ce(z, w, t, name):
    b, c = z.shape
    log_s = log_softmax_temp(z, 1.0)
    log_st = log_s[np.arange(b), t]
    loss = float(-(w * log_st).sum() / b)
    grad = w[:, None] * (np.exp(log_s) - _one_hot(t, c)) / b
    return LossOutput(loss, grad, terms={name: loss})


def teacher_target_probs(teacher_logits, t):
    """Teacher probability of the target class at temperature 1."""
    tz = as_matrix(teacher_logits, "teacher logits")
    t = _targets(t, tz.shape[0], tz.shape[1])
    return softmax_temp(tz, 1.0)[np.arange(tz.shape[0]), t]


def nkd_loss(student_logits, teacher_logits, labels, config=None):
    """Label CE + soft loss + ``alpha * lam**2 *`` distributed loss.

    ``config`` switches individual terms off for ablations, or swaps them
    for classical KD. Per-term contributions (already weighted) are reported
    in ``terms`` and sum to ``loss``.
    """
    config = config or DistillConfig()
    s, tz = _check_pair(student_logits, teacher_logits)
    labels = _labels_for(labels, s)
    t = labels.target_index

    out = ce_loss(s, labels)
    if config.use_soft:
        if config.perfect_teacher:
            tt = np.ones(s.shape[0])
        else:
            tt = teacher_target_probs(tz, t)
        out = out + soft_loss(s, tt, t)
    if config.use_distributed:
        scale = config.alpha * config.lam ** 2
        out = out + distributed_loss(s, tz, config.lam, t).scaled(scale)
    if config.use_classical:
        out = out + kd_classical(s, tz, config.lam, lambda_sq=config.classical_lambda_sq)
    return out


def smooth_weight(student_target_probs, labels, strategy=DEFAULT_STRATEGY):
    """Per-sample soft-target weight built from batch statistics of ``S_t``.

    Returns ``(w, clamp_events)``. ``labels`` may be a :class:`LabelBatch`
    or the column of target label values ``V_t``.
    """
    strategy = WeightStrategy(strategy)
    st = as_column(student_target_probs, "student target probs")
    if st.size == 0:
        raise InvalidInputError("batch is empty")
    if np.any(st < 0) or np.any(st > 1):
        raise InvalidInputError("student target probabilities must lie in [0, 1]")
    vt = labels.target_value if isinstance(labels, LabelBatch) else as_column(labels, "V_t")
    if vt.size != st.size:
        raise DimensionError(f"{vt.size} label values for a batch of {st.size}")

    clamps = 0
    if strategy is WeightStrategy.RAW:
        w = st.copy()
    elif strategy is WeightStrategy.ST_PLUS_VT_MINUS_MEAN:
        w = st + vt - st.mean()
    elif strategy is WeightStrategy.BATCH_SOFTMAX_TIMES_SUM:
        e = np.exp(st - st.max())
        w = e / e.sum() * vt.sum()
    elif strategy is WeightStrategy.SQRT_ST_MINUS_MIN:
        w = np.sqrt(np.maximum(st - st.min(), 0.0))
    elif strategy in (WeightStrategy.ST_OVER_MAX, WeightStrategy.ST_OVER_MEAN):
        denom = st.max() if strategy is WeightStrategy.ST_OVER_MAX else st.mean()
        if denom < EPS:
            denom, clamps = EPS, 1
        w = st / denom
    else:
        raise InvalidParameterError("the teacher strategy needs teacher outputs, not S_t")
    return w, clamps


def tfnkd_loss(student_logits, labels, strategy=DEFAULT_STRATEGY, weights=None):
    """Teacher-free loss: label CE plus ``-w log S_t`` with ``w`` from :func:`smooth_weight`.

    ``w`` is a constant for differentiation purposes. Passing ``weights``
    pins it to a previously recorded value.
    """
    z = as_matrix(student_logits, "student logits")
    labels = _labels_for(labels, z)
    t = labels.target_index
    clamps = 0
    if weights is None:
        st = softmax_temp(z, 1.0)[np.arange(z.shape[0]), t]
        weights, clamps = smooth_weight(st, labels, strategy)
    else:
        weights = as_column(weights, "weights")
    out = ce_loss(z, labels) + _weighted_target_ce(z, weights, t, "tf_soft")
    out.clamp_events += clamps
    out.degenerate = out.degenerate or clamps > 0
    return out
