"""Small ReLU MLP classifiers with explicit forward and backward passes.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"NKDP"
    4       4     u32 format version (1)
    8       4     u32 number of layers L
    12      8*L   per layer: u32 fan_in, u32 fan_out
    ...           per layer: fan_in*fan_out float64 weights (row-major),
                             then fan_out float64 biases

Layer ``l`` maps ``fan_in -> fan_out``; the model spec is recovered from
the shapes, so a checkpoint is self-describing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, InvalidInputError, NKDError, as_matrix

CHECKPOINT_MAGIC = b"NKDP"
CHECKPOINT_VERSION = 1


class StaleCacheError(NKDError, RuntimeError):
    """backward() was handed a cache from different parameters."""


class CheckpointError(NKDError, ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = ()
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be at least 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise InvalidInputError("all layer widths must be at least 1")
        if self.activation != "relu":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParams:
    weights: list
    biases: list
    version: int = 0

    @property
    def spec(self):
        dims = [w.shape for w in self.weights]
        return ModelSpec(dims[0][0], tuple(d[1] for d in dims[:-1]), dims[-1][1])

    def copy(self):
        return ModelParams([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.version)

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class ForwardCache:
    version: int
    params_id: int
    inputs: list = field(default_factory=list)      # input to each layer
    preacts: list = field(default_factory=list)     # pre-activation of each hidden layer


def init_params(spec, rng):
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


def forward(params, inputs):
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != params.weights[0].shape[0]:
        raise DimensionError(
            f"inputs have {x.shape[1]} features, model expects {params.weights[0].shape[0]}")
    cache = ForwardCache(params.version, id(params))
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        a = h @ w + b
        if i < last:
            cache.preacts.append(a)
            h = np.maximum(a, 0.0)
        else:
            h = a
    return h, cache


def backward(params, cache, grad_logits):
    """Gradients ``(dW, db)`` per layer for upstream ``dLoss/dLogits``."""
    if cache.version != params.version or cache.params_id != id(params):
        raise StaleCacheError("forward cache does not belong to these parameters")
    g = as_matrix(grad_logits, "grad_logits")
    n_out = params.weights[-1].shape[1]
    if g.shape != (cache.inputs[0].shape[0], n_out):
        raise DimensionError(f"grad_logits has shape {g.shape}")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * (cache.preacts[i - 1] > 0)
    return gw, gb


def predict_logits(params, inputs, chunk=4096):
    x = as_matrix(inputs, "inputs")
    parts = [forward(params, x[i:i + chunk])[0] for i in range(0, x.shape[0], chunk)]
    return np.vstack(parts) if parts else np.zeros((0, params.weights[-1].shape[1]))


def params_to_bytes(params):
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.weights))]
    out += [struct.pack("<II", *w.shape) for w in params.weights]
    for w, b in zip(params.weights, params.biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(buf):
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic at offset 0)")
    version, n_layers = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    off = 12
    if len(buf) < off + 8 * n_layers:
        raise CheckpointError(f"truncated layer table at offset {off}")
    shapes = [struct.unpack_from("<II", buf, off + 8 * i) for i in range(n_layers)]
    off += 8 * n_layers
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        need = 8 * (fan_in * fan_out + fan_out)
        if len(buf) < off + need:
            raise CheckpointError(f"truncated layer data at offset {off}")
        w = np.frombuffer(buf, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(buf, "<f8", fan_out, off)
        off += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after offset {off}")
    return ModelParams(weights, biases)


def save_params(params, path):
    with open(path, "wb") as f:
        f.write(params_to_bytes(params))


def load_params(path, spec=None):
    with open(path, "rb") as f:
        params = params_from_bytes(f.read())
    if spec is not None and params.spec != spec:
        raise CheckpointError(f"checkpoint holds {params.spec}, expected {spec}")
    return params
