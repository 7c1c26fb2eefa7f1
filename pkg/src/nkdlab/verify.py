"""Self-contained numerical checks of the loss implementations.

Each check returns a :class:`CheckResult` with the worst residual found and
the inputs that produced it, so a failure can be replayed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .numerics import make_rng

CLASS_COUNTS = (2, 3, 10, 100)
TEMPERATURES = (0.5, 1.0, 2.0, 4.0)
LS_ALPHAS = (0.05, 0.1, 0.2)
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_residual: float
    tolerance: float
    cases: int
    seconds: float = 0.0
    worst_case: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_residual < self.tolerance

    def line(self):
        status, op = ("PASS", "<") if self.passed else ("FAIL", ">=")
        return (f"{status} {self.name} max residual {self.max_residual:.3e} "
                f"{op} {self.tolerance:.0e} over {self.cases} cases ({self.seconds:.2f}s)")


def random_logits(rng, b, c):
    """Logits with a per-row scale drawn log-uniformly from [1e-2, 1e1]."""
    scale = 10.0 ** rng.uniform(-2, 1, size=(b, 1))
    return rng.standard_normal((b, c)) * scale


def _grid(trials, *axes):
    """Cycle through the Cartesian product of ``axes`` ``trials`` times."""
    combos = [()]
    for ax in axes:
        combos = [c + (v,) for c in combos for v in ax]
    return [combos[i % len(combos)] for i in range(trials)]


def check_kd_identity(trials=1000, seed=0, inject_bug=False):
    rng = make_rng(seed, "kd-identity")
    start = time.perf_counter()
    worst = CheckResult("kd decomposition", 0.0, 1e-9, trials)
    for c, lam in _grid(trials, CLASS_COUNTS, TEMPERATURES):
        s, tz = random_logits(rng, 1, c), random_logits(rng, 1, c)
        t = rng.integers(0, c, size=1)
        direct = L.kd_classical(s, tz, lam).loss
        split = L.kd_decomposed(s, tz, lam, t)
        if inject_bug:
            split *= 1.01
        r = abs(direct - split)
        if r >= worst.max_residual:
            worst.max_residual = r
            worst.worst_case = {"C": c, "lam": lam, "student": s.tolist(),
                                "teacher": tz.tolist(), "t": t.tolist()}
    worst.seconds = time.perf_counter() - start
    return worst


def check_ls_identity(trials=1000, seed=0):
    rng = make_rng(seed, "ls-identity")
    start = time.perf_counter()
    worst = CheckResult("label-smooth decomposition", 0.0, 1e-9, trials)
    for c, a in _grid(trials, CLASS_COUNTS, LS_ALPHAS):
        s = random_logits(rng, 1, c)
        t = rng.integers(0, c, size=1)
        direct = L.label_smooth_ce(s, L.LabelBatch.from_indices(t, c), a).loss
        r = abs(direct - L.ls_decomposed(s, t, a))
        if r >= worst.max_residual:
            worst.max_residual = r
            worst.worst_case = {"C": c, "alpha_ls": a, "student": s.tolist(), "t": t.tolist()}
    worst.seconds = time.perf_counter() - start
    return worst


def check_normalization(trials=1000, seed=0):
    """Renormalised non-target masses sum to one where ``1 - p_t > 1e-6``."""
    rng = make_rng(seed, "normalization")
    start = time.perf_counter()
    worst = CheckResult("non-target normalization", 0.0, 1e-10, 0)
    for c, lam in _grid(trials, CLASS_COUNTS, TEMPERATURES):
        s, tz = random_logits(rng, 1, c), random_logits(rng, 1, c)
        t = rng.integers(0, c, size=1)
        t_hat, s_hat = L.nontarget_distributions(s, tz, lam, t)
        for p_hat, z in ((t_hat, tz), (s_hat, s)):
            if 1.0 - L.softmax_temp(z, lam)[0, t[0]] <= 1e-6:
                continue
            worst.cases += 1
            r = abs(p_hat.sum() - 1.0)
            if r >= worst.max_residual:
                worst.max_residual = r
                worst.worst_case = {"C": c, "lam": lam, "logits": z.tolist(), "t": t.tolist()}
    worst.seconds = time.perf_counter() - start
    return worst


def finite_difference(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` at every entry of matrix ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b, floor=1e-6):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _loss_cases(rng, c, b):
    """(name, f(student) -> LossOutput) for one random instance."""
    tz = random_logits(rng, b, c)
    t = rng.integers(0, c, size=b)
    one_hot = L.LabelBatch.from_indices(t, c)
    lam = float(rng.choice(TEMPERATURES))
    alpha_ls = float(rng.choice(LS_ALPHAS))
    tt = rng.uniform(0, 1, size=b)
    cfg = L.DistillConfig(alpha=1.5, lam=lam)
    # soft labels: mixture of two one-hots, kept away from a tie
    lam_mix = rng.uniform(0.55, 0.95)
    other = (t + rng.integers(1, c, size=b)) % c
    mixed = L.LabelBatch(lam_mix * one_hot.values + (1 - lam_mix) * L.LabelBatch.from_indices(other, c).values)

    def tfnkd_frozen(s):
        st = L.softmax_temp(s)[np.arange(b), t]
        w, _ = L.smooth_weight(st, one_hot, L.DEFAULT_STRATEGY)
        return lambda x: L.tfnkd_loss(x, one_hot, weights=w)

    return [
        ("ce", lambda x: L.ce_loss(x, mixed)),
        ("label_smooth_ce", lambda x: L.label_smooth_ce(x, one_hot, alpha_ls)),
        ("kd_classical", lambda x: L.kd_classical(x, tz, lam)),
        ("distributed", lambda x: L.distributed_loss(x, tz, lam, t)),
        ("soft", lambda x: L.soft_loss(x, tt, t)),
        ("nkd", lambda x: L.nkd_loss(x, tz, one_hot, cfg)),
        ("tfnkd", tfnkd_frozen),
    ]


GRADIENT_LOSSES = ("ce", "label_smooth_ce", "kd_classical", "distributed", "soft", "nkd", "tfnkd")


def check_gradients(instances=100, seed=0, batch=3):
    """Analytic gradient vs. central differences for every loss.

    The tf-NKD weight is computed once at the base point and held fixed
    while differencing.
    """
    rng = make_rng(seed, "gradients")
    results = {n: CheckResult(f"gradient {n}", 0.0, 1e-5, 0) for n in GRADIENT_LOSSES}
    for i in range(instances):
        c = CLASS_COUNTS[i % len(CLASS_COUNTS)]
        s = random_logits(rng, batch, c)
        for name, make in _loss_cases(rng, c, batch):
            start = time.perf_counter()
            f = make(s) if name == "tfnkd" else make
            analytic = f(s).grad
            numeric = finite_difference(lambda x: f(x).loss, s)
            r = relative_error(analytic, numeric)
            res = results[name]
            res.cases += 1
            res.seconds += time.perf_counter() - start
            if r >= res.max_residual:
                res.max_residual = r
                res.worst_case = {"C": c, "student": s.tolist()}
    return list(results.values())


def run_all(trials=1000, grad_instances=100, seed=0, inject_bug=False):
    checks = [
        check_kd_identity(trials, seed, inject_bug),
        check_ls_identity(trials, seed),
        check_normalization(trials, seed),
    ]
    checks += check_gradients(grad_instances, seed)
    return checks
