"""Dense float64 array helpers, the temperature softmax family and seeded RNG.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Random numbers come from numpy's Philox counter-based
bit generator, seeded through ``SeedSequence`` so that a seed tuple maps to
the same stream on every platform.
"""
from __future__ import annotations

import numpy as np


class NKDError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameterError(NKDError, ValueError):
    pass


class InvalidInputError(NKDError, ValueError):
    pass


class DimensionError(NKDError, ValueError):
    pass


def as_matrix(x, name="input"):
    """Return ``x`` as a finite, C-ordered float64 matrix."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return m


def as_column(x, name="input"):
    v = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return v


def _check_temperature(lam):
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidParameterError(f"temperature must be positive, got {lam}")


def log_softmax_temp(logits, lam=1.0):
    """Row-wise ``log softmax(logits / lam)`` via a shifted log-sum-exp."""
    _check_temperature(lam)
    z = as_matrix(logits, "logits") / lam
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_temp(logits, lam=1.0):
    """Row-wise temperature softmax with max subtraction."""
    _check_temperature(lam)
    z = as_matrix(logits, "logits") / lam
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_mean(m):
    return as_matrix(m).mean(axis=1)


def row_max(m):
    return as_matrix(m).max(axis=1)


def row_min(m):
    return as_matrix(m).min(axis=1)


def batch_mean(column):
    """Mean of a per-sample column across the batch dimension."""
    v = as_column(column, "column")
    if v.size == 0:
        raise InvalidInputError("batch is empty")
    return float(v.mean())


def make_rng(seed, *stream):
    """Philox generator keyed by ``(seed, *stream)``.

    Distinct ``stream`` tuples give statistically independent sequences for
    the same base seed (e.g. ``make_rng(seed, "epoch", 3)``).
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        if isinstance(s, str):
            words.extend(s.encode("utf-8"))
        else:
            words.append(int(s))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
