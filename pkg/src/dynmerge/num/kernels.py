"""Dense forward kernels shared by the backbone and the agent networks.

Storage is float32 by default. Every kernel accumulates in float64 and casts
the result back to the storage dtype, so a kernel call is a pure function of
its inputs. ``float64_mode()`` switches storage to float64 for gradient checks.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_DTYPE = np.float32

# tanh-approximation GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    pass


class NumericFault(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""

    def __init__(self, msg, block=None):
        super().__init__(msg)
        self.block = block


def dtype():
    return _DTYPE


def set_precision(bits: int):
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DTYPE = np.float32 if bits == 32 else np.float64


@contextlib.contextmanager
def float64_mode():
    prev = _DTYPE
    set_precision(64)
    try:
        yield
    finally:
        set_precision(32 if prev is np.float32 else 64)


def asarray(x):
    return np.asarray(x, dtype=_DTYPE)


def _out(x):
    return np.asarray(x, dtype=_DTYPE)


def check_finite(x, what="kernel output", block=None):
    if not np.all(np.isfinite(x)):
        where = f" at block {block}" if block is not None else ""
        raise NumericFault(f"non-finite values in {what}{where}", block=block)
    return x


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if b.ndim == 2 and a.ndim > 2:
        return _out((a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1]))
    return _out(np.matmul(a, b))


def layernorm(x, gamma, beta, eps=1e-6):
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != np.shape(gamma)[-1] or x.shape[-1] != np.shape(beta)[-1]:
        raise ShapeError(f"layernorm width mismatch: {x.shape} vs {np.shape(gamma)}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return _out(xhat * np.asarray(gamma, np.float64) + np.asarray(beta, np.float64))


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return _out(z / z.sum(axis=-1, keepdims=True))


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return _out(0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return _out(out)


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # log(sigmoid(x)) = -softplus(-x), stable for large |x|
    return _out(np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x))))
