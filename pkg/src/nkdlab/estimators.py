"""scikit-learn compatible wrappers around the numpy MLP trainer.

``MLPStudentClassifier`` trains with CE, label-smoothed CE or the
teacher-free loss. ``NKDClassifier`` distils from any fitted classifier that
exposes ``decision_function`` (or from precomputed teacher logits).
"""
from __future__ import annotations

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .losses import DEFAULT_STRATEGY, DistillConfig, LabelBatch
from .models import ModelSpec, predict_logits
from .numerics import softmax_temp
from .training import CE, NKD, LabelSmooth, TeacherCache, TfNKD, TrainConfig, train


class _MLPClassifierBase(ClassifierMixin, BaseEstimator):

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, schedule=self.schedule,
                           milestones=tuple(self.milestones), gamma=self.gamma,
                           weight_decay=self.weight_decay, seed=self.random_state)

    def _prepare(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        k = self.classes_.size
        return Dataset(X.astype(np.float64), LabelBatch.from_indices(y_idx, k),
                       np.arange(X.shape[0], dtype=np.int64))

    def _fit(self, data, loss_fn):
        spec = ModelSpec(data.dim, tuple(self.hidden_dims), data.num_classes)
        result = train(spec, data, None, loss_fn, self._train_config())
        self.params_ = result.params
        self.history_ = result.metrics
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_logits(self.params_, X)

    def predict_proba(self, X):
        return softmax_temp(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class MLPStudentClassifier(_MLPClassifierBase):
    """ReLU MLP trained by momentum SGD.

    Parameters
    ----------
    loss : {"ce", "label_smooth", "tfnkd"}
        Training objective. ``"tfnkd"`` adds the teacher-free soft-target
        term weighted according to ``strategy``.
    """

    def __init__(self, hidden_dims=(16,), loss="ce", alpha_ls=0.1, strategy=DEFAULT_STRATEGY.value,
                 epochs=60, batch_size=64, lr=0.1, momentum=0.9, schedule="step",
                 milestones=(30, 45), gamma=0.1, weight_decay=0.0, random_state=0):
        self.hidden_dims = hidden_dims
        self.loss = loss
        self.alpha_ls = alpha_ls
        self.strategy = strategy
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.schedule = schedule
        self.milestones = milestones
        self.gamma = gamma
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        data = self._prepare(X, y)
        if self.loss == "ce":
            loss_fn = CE()
        elif self.loss == "label_smooth":
            loss_fn = LabelSmooth(self.alpha_ls)
        elif self.loss == "tfnkd":
            loss_fn = TfNKD(self.strategy)
        else:
            raise ValueError(f"unknown loss {self.loss!r}")
        return self._fit(data, loss_fn)


class NKDClassifier(_MLPClassifierBase):
    """Student MLP distilled from a teacher's logits.

    ``teacher`` must be fitted and expose ``decision_function`` with columns
    in the same class order; alternatively pass ``teacher_logits`` to
    :meth:`fit`. The teacher is never refitted.
    """

    def __init__(self, teacher=None, hidden_dims=(16,), alpha=1.5, temperature=1.0,
                 use_soft=True, use_distributed=True, epochs=60, batch_size=64, lr=0.1,
                 momentum=0.9, schedule="step", milestones=(30, 45), gamma=0.1,
                 weight_decay=0.0, random_state=0):
        self.teacher = teacher
        self.hidden_dims = hidden_dims
        self.alpha = alpha
        self.temperature = temperature
        self.use_soft = use_soft
        self.use_distributed = use_distributed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.schedule = schedule
        self.milestones = milestones
        self.gamma = gamma
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y, teacher_logits=None):
        data = self._prepare(X, y)
        if teacher_logits is None:
            if self.teacher is None:
                raise ValueError("need a fitted teacher or teacher_logits")
            teacher_logits = self.teacher.decision_function(data.inputs)
        teacher_logits = check_array(teacher_logits)
        if teacher_logits.shape != (len(data), data.num_classes):
            raise ValueError(f"teacher logits have shape {teacher_logits.shape}, "
                             f"expected {(len(data), data.num_classes)}")
        digest = hashlib.sha256(np.ascontiguousarray(teacher_logits).tobytes()).hexdigest()
        cache = TeacherCache(data.sample_ids, teacher_logits, digest)
        config = DistillConfig(alpha=self.alpha, lam=self.temperature,
                               use_soft=self.use_soft, use_distributed=self.use_distributed)
        return self._fit(data, NKD(cache, config))
