import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from nkdlab import MLPStudentClassifier, NKDClassifier
from nkdlab.data import BlobSpec, blob_splits

FAST = dict(epochs=8, batch_size=32, lr=0.05, milestones=(6,))


@pytest.fixture(scope="module")
def blobs():
    tr, te = blob_splits(BlobSpec(4, 6, 60, 1.0, 0.7, seed=2), 20)
    names = np.array(["a", "b", "c", "d"])
    return tr.inputs, names[tr.targets], te.inputs, names[te.targets]


@pytest.fixture(scope="module")
def teacher(blobs):
    X, y, _, _ = blobs
    return MLPStudentClassifier(hidden_dims=(32,), **FAST).fit(X, y)


def test_params_and_clone():
    est = MLPStudentClassifier(loss="tfnkd", epochs=3)
    params = est.get_params()
    assert params["loss"] == "tfnkd" and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lr=0.01)
    assert est.lr == 0.01


@pytest.mark.parametrize("loss", ["ce", "label_smooth", "tfnkd"])
def test_student_fits_string_labels(blobs, loss):
    X, y, Xt, yt = blobs
    est = MLPStudentClassifier(loss=loss, **FAST).fit(X, y)
    pred = est.predict(Xt)
    assert set(pred) <= set(est.classes_)
    assert est.score(Xt, yt) > 0.6
    proba = est.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert [m.epoch for m in est.history_ if m.split == "train"] == list(range(FAST["epochs"] + 1))


def test_fit_is_deterministic(blobs):
    X, y, Xt, _ = blobs
    a = MLPStudentClassifier(**FAST).fit(X, y).decision_function(Xt)
    b = MLPStudentClassifier(**FAST).fit(X, y).decision_function(Xt)
    np.testing.assert_array_equal(a, b)


def test_pipeline(blobs):
    X, y, Xt, yt = blobs
    pipe = make_pipeline(StandardScaler(), MLPStudentClassifier(**FAST)).fit(X, y)
    assert pipe.score(Xt, yt) > 0.6


def test_nkd_from_teacher_and_from_logits(blobs, teacher):
    X, y, Xt, yt = blobs
    a = NKDClassifier(teacher=teacher, **FAST).fit(X, y)
    b = NKDClassifier(**FAST).fit(X, y, teacher_logits=teacher.decision_function(X))
    np.testing.assert_array_equal(a.decision_function(Xt), b.decision_function(Xt))
    assert a.score(Xt, yt) > 0.6


def test_nkd_without_terms_is_plain_ce(blobs, teacher):
    X, y, Xt, _ = blobs
    plain = MLPStudentClassifier(**FAST).fit(X, y)
    nkd = NKDClassifier(teacher=teacher, use_soft=False, use_distributed=False, **FAST).fit(X, y)
    np.testing.assert_array_equal(plain.decision_function(Xt), nkd.decision_function(Xt))


def test_errors(blobs):
    X, y, _, _ = blobs
    with pytest.raises(NotFittedError):
        MLPStudentClassifier().predict(X)
    with pytest.raises(ValueError, match="unknown loss"):
        MLPStudentClassifier(loss="hinge", epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="teacher"):
        NKDClassifier(epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="shape"):
        NKDClassifier(epochs=1).fit(X, y, teacher_logits=np.zeros((len(X), 3)))
    with pytest.raises(ValueError):
        MLPStudentClassifier(epochs=1).fit(X, np.zeros(len(X)))
    est = MLPStudentClassifier(epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="features"):
        est.predict(X[:, :3])
