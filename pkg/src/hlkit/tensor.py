"""Dense 2-D numerics used by every other module.

All operations are pure functions over numpy arrays, deterministic for equal
inputs, and reject or never produce non-finite values. Training and inference
run in float32; passing float64 arrays switches the whole stack to 64-bit,
which the gradient checker uses to keep finite-difference noise below its
tolerance.
"""

import numpy as np

from .errors import ShapeError
from .validation import check_finite, check_matrix, check_vector

DTYPE = np.float32


def matmul(a: np.ndarray, b: np.ndarray, names: tuple[str, str] = ("a", "b")) -> np.ndarray:
    """Matrix product with shape checking.

    Accumulation order is numpy's fixed row-major contraction, so repeated
    calls with equal inputs are bitwise identical.
    """
    a = check_matrix(a, names[0])
    b = check_matrix(b, names[1])
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {names[0]} of shape {a.shape} by {names[1]} of shape {b.shape}"
        )
    return check_finite(a @ b, "matmul result")


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Layer normalization over the last axis.

    Normalizes with the mean and population variance of each row, then applies
    the elementwise affine ``gain * xhat + bias``. Accepts a vector or any
    array whose last axis matches ``gain``/``bias``.
    """
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    x = np.asarray(x)
    gain = check_vector(gain, "gain")
    bias = check_vector(bias, "bias")
    if gain.shape[0] != bias.shape[0] or x.shape[-1] != gain.shape[0]:
        raise ShapeError(
            f"layer_norm width mismatch: x has width {x.shape[-1]}, "
            f"gain {gain.shape[0]}, bias {bias.shape[0]}"
        )
    check_finite(x, "x")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return check_finite(gain * xhat + bias, "layer_norm result")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Exp-normalize each row with max-subtraction for stability.

    Every output row sums to 1. Works on any array; the softmax is taken over
    the last axis.
    """
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax result")


def sigmoid(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu_fast(x):
    """Sigmoid-weighted linear unit ``x * sigmoid(1.702 x)``.

    The fast GELU variant used by ViT-B/32-class encoders. Elementwise; scalar
    in, scalar out.
    """
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(DTYPE)
    out = arr * sigmoid(arr.dtype.type(1.702) * arr)
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def gelu_fast_grad(x):
    """Derivative of :func:`gelu_fast` at ``x``."""
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(DTYPE)
    c = arr.dtype.type(1.702)
    s = sigmoid(c * arr)
    return s + arr * c * s * (1.0 - s)
