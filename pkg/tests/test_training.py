import numpy as np
import pytest

from nkdlab.data import BlobSpec, blob_splits
from nkdlab.losses import DistillConfig, LossOutput, WeightStrategy
from nkdlab.models import ModelParams, ModelSpec, forward, init_params, params_to_bytes
from nkdlab.numerics import InvalidInputError, InvalidParameterError, make_rng
from nkdlab.training import (
    CE,
    NKD,
    CacheDigestError,
    IncompleteCacheError,
    LabelSmooth,
    NumericalError,
    TfNKD,
    TrainConfig,
    build_teacher_cache,
    cache_from_bytes,
    cache_to_bytes,
    easy_and_hard_samples,
    load_cache,
    mean_target_prob,
    metrics_csv,
    save_cache,
    sgd_init,
    sgd_step,
    topk_accuracy,
    train,
)

SMALL = TrainConfig(epochs=3, batch_size=16, lr=0.05, milestones=(2,))


@pytest.fixture(scope="module")
def toy():
    return blob_splits(BlobSpec(4, 5, 30, 1.0, 0.8, seed=3), 10)


@pytest.fixture(scope="module")
def teacher_cache(toy):
    tr, _ = toy
    res = train(ModelSpec(5, (12,), 4), tr, None, CE(), SMALL)
    return res.params, build_teacher_cache(res.params, tr)


def _params(values):
    return ModelParams([np.array([[values[0]]])], [np.array([values[1]])])


class TestSGD:
    def test_vanilla(self):
        p = _params([1.0, 2.0])
        g = ([np.array([[0.5]])], [np.array([-1.0])])
        q, _ = sgd_step(p, g, sgd_init(p), lr=0.1)
        assert q.weights[0][0, 0] == 1.0 - 0.1 * 0.5
        assert q.biases[0][0] == 2.0 + 0.1
        assert q.version == p.version + 1

    def test_zero_grads_fixed_point(self):
        p = _params([1.0, 2.0])
        state = sgd_init(p)
        zero = ([np.zeros((1, 1))], [np.zeros(1)])
        q = p
        for _ in range(5):
            q, state = sgd_step(q, zero, state, lr=0.1, momentum=0.9)
        assert params_to_bytes(q) == params_to_bytes(p)

    def test_momentum_unroll(self):
        p = _params([1.0, 0.0])
        g1, g2 = 0.3, -0.2
        state = sgd_init(p)
        q, state = sgd_step(p, ([np.array([[g1]])], [np.zeros(1)]), state, lr=0.1, momentum=0.9)
        q, state = sgd_step(q, ([np.array([[g2]])], [np.zeros(1)]), state, lr=0.1, momentum=0.9)
        v1 = g1
        v2 = 0.9 * v1 + g2
        expected = 1.0 - 0.1 * v1 - 0.1 * v2
        assert abs(q.weights[0][0, 0] - expected) < 1e-12

    def test_weight_decay_on_weights_only(self):
        p = _params([2.0, 2.0])
        zero = ([np.zeros((1, 1))], [np.zeros(1)])
        q, _ = sgd_step(p, zero, sgd_init(p), lr=0.1, weight_decay=0.5)
        assert q.weights[0][0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
        assert q.biases[0][0] == 2.0

    def test_non_finite_aborts(self):
        p = _params([1.0, 1.0])
        with pytest.raises(NumericalError):
            sgd_step(p, ([np.array([[np.nan]])], [np.zeros(1)]), sgd_init(p), lr=0.1)


def test_schedules():
    step = TrainConfig(lr=0.1, schedule="step", milestones=(30, 45), gamma=0.1)
    assert [step.lr_at(e) for e in (0, 29, 30, 44, 45)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])
    cos = TrainConfig(lr=0.2, schedule="cosine", epochs=10)
    assert cos.lr_at(0) == pytest.approx(0.2) and cos.lr_at(5) == pytest.approx(0.1)
    assert TrainConfig(schedule="constant").lr_at(50) == 0.1
    with pytest.raises(InvalidParameterError):
        TrainConfig(momentum=1.0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(schedule="linear")


def test_topk_accuracy():
    logits = np.array([[3.0, 2.0, 1.0], [1.0, 2.0, 3.0], [1.0, 1.0, 0.0]])
    top1, top2 = topk_accuracy(logits, np.array([0, 1, 1]), 2)
    assert top1 == pytest.approx(1 / 3)   # row 3 ties resolve to class 0
    assert top2 == 1.0


def test_zero_epochs_reports_initial_model(toy):
    tr, te = toy
    spec = ModelSpec(5, (8,), 4)
    cfg = TrainConfig(epochs=0, seed=4)
    res = train(spec, tr, te, CE(), cfg)
    assert [m.epoch for m in res.metrics] == [0, 0]
    assert params_to_bytes(res.params) == params_to_bytes(init_params(spec, make_rng(4, "init")))


def test_deterministic_runs(toy):
    tr, te = toy
    a = train(ModelSpec(5, (8,), 4), tr, te, TfNKD(), SMALL)
    b = train(ModelSpec(5, (8,), 4), tr, te, TfNKD(), SMALL)
    assert params_to_bytes(a.params) == params_to_bytes(b.params)
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
    c = train(ModelSpec(5, (8,), 4), tr, te, TfNKD(), TrainConfig(**{**SMALL.__dict__, "seed": 1}))
    assert params_to_bytes(a.params) != params_to_bytes(c.params)


def test_metrics_invariants(toy):
    tr, te = toy
    res = train(ModelSpec(5, (8,), 4), tr, te, LabelSmooth(0.1), SMALL)
    assert {m.split for m in res.metrics} == {"train", "test"}
    assert all(0 <= m.top1 <= m.topk <= 1 for m in res.metrics)
    header = metrics_csv(res.metrics).splitlines()[0]
    assert header == "epoch,split,top1,topk,mean_loss,clamp_events"


class TestTeacherCache:
    def test_complete_and_matches_forward(self, toy, teacher_cache):
        tr, _ = toy
        params, cache = teacher_cache
        assert len(cache) == len(tr)
        direct = forward(params, tr.inputs)[0]
        np.testing.assert_allclose(cache.lookup(tr.sample_ids), direct, rtol=0, atol=1e-12)

    def test_round_trip_bit_identical(self, teacher_cache, tmp_path):
        _, cache = teacher_cache
        path = tmp_path / "t.cache"
        save_cache(cache, path)
        back = load_cache(path, expected_digest=cache.digest)
        assert back.logits.tobytes() == cache.logits.tobytes()
        assert back.sample_ids.tolist() == cache.sample_ids.tolist()

    def test_digest_mismatch(self, teacher_cache):
        _, cache = teacher_cache
        with pytest.raises(CacheDigestError):
            cache_from_bytes(cache_to_bytes(cache), expected_digest="0" * 64)

    def test_read_only(self, teacher_cache):
        _, cache = teacher_cache
        with pytest.raises(ValueError):
            cache.logits[0, 0] = 1.0

    def test_missing_ids_listed(self, toy, teacher_cache):
        tr, te = toy
        params, _ = teacher_cache
        partial = build_teacher_cache(params, tr.subset(np.arange(len(tr) - 3)))
        with pytest.raises(IncompleteCacheError) as e:
            train(ModelSpec(5, (8,), 4), tr, te, NKD(partial), SMALL)
        assert e.value.missing == tr.sample_ids[-3:].tolist()

    def test_mean_target_prob_in_range(self, toy, teacher_cache):
        assert 0.25 < mean_target_prob(teacher_cache[1], toy[0]) <= 1.0


def test_nkd_batch_terms_add_up(toy, teacher_cache):
    tr, te = toy
    _, cache = teacher_cache
    logged = []
    train(ModelSpec(5, (8,), 4), tr, te, NKD(cache, DistillConfig(lam=2.0)), SMALL,
          on_batch=lambda e, s, ids, out: logged.append(out))
    assert logged
    for out in logged:
        assert set(out.terms) == {"ce", "soft", "distributed"}
        assert abs(out.loss - sum(out.terms.values())) < 1e-10


def test_weight_trace(toy):
    tr, te = toy
    easy, hard = easy_and_hard_samples(tr)
    assert easy != hard
    res = train(ModelSpec(5, (8,), 4), tr, te, TfNKD(), SMALL, trace_ids=[easy, hard])
    trace = res.trace
    assert len(trace.rows) == 2 * (SMALL.epochs + 1)
    for r in trace.rows:
        assert r["w_st_plus_vt_minus_mean"] == r["s_t"] + r["v_t"] - r["batch_mean_s_t"]
    assert [r["epoch"] for r in trace.rows if r["sample_id"] == easy] == [0, 1, 2, 3]
    stab = trace.stability()
    assert stab[easy]["s_t"] == pytest.approx(trace.series(easy).std())
    assert len(stab[hard]) == 7
    header = trace.to_csv().splitlines()[0].split(",")
    assert header[:3] == ["epoch", "sample_id", "s_t"]
    assert sum(h.startswith("w_") for h in header) == 6
    with pytest.raises(InvalidInputError):
        train(ModelSpec(5, (8,), 4), tr, te, CE(), SMALL, trace_ids=[10**9])


def test_tfnkd_rejects_teacher_strategy():
    with pytest.raises(InvalidParameterError):
        TfNKD(WeightStrategy.TEACHER)


def test_mixup_training(toy, teacher_cache):
    tr, te = toy
    cfg = TrainConfig(**{**SMALL.__dict__, "mixup_beta": 0.4})
    a = train(ModelSpec(5, (8,), 4), tr, te, TfNKD(), cfg)
    b = train(ModelSpec(5, (8,), 4), tr, te, TfNKD(), cfg)
    assert params_to_bytes(a.params) == params_to_bytes(b.params)
    with pytest.raises(InvalidParameterError):
        train(ModelSpec(5, (8,), 4), tr, te, NKD(teacher_cache[1]), cfg)


def test_nan_loss_aborts_with_dump(toy):
    tr, te = toy

    def bad(logits, labels, ids):
        return LossOutput(float("nan"), np.zeros_like(logits))

    with pytest.raises(NumericalError) as e:
        train(ModelSpec(5, (8,), 4), tr, te, bad, SMALL)
    assert set(e.value.dump) == {"inputs", "labels", "sample_ids", "logits"}
