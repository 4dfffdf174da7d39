"""NumPy reference implementation of the hot kernels.

Mirrors the API of the compiled core (aclab._ckernels). All arrays are
C-contiguous float64, 2-D unless stated. Gradient helpers return fresh
arrays; nothing here aliases its inputs.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def matmul(a, b):
    return a @ b


def matmul_nt(a, b):
    """a @ b.T"""
    return a @ b.T


def matmul_tn(a, b):
    """a.T @ b"""
    return a.T @ b


def gelu(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x, g):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm(x, eps):
    """Row-wise normalization without affine parameters.

    Returns (y, rstd); y doubles as the normalized cache for the backward.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * rstd[:, None]
    return y, rstd


def layernorm_grad(y, rstd, g):
    gm = g.mean(axis=1, keepdims=True)
    gym = (g * y).mean(axis=1, keepdims=True)
    return (g - gm - y * gym) * rstd[:, None]


def modulate(x, scale, shift):
    """x * (1 + scale) + shift"""
    return x * (1.0 + scale) + shift


def modulate_grads(x, scale, g):
    """Returns (dx, dscale); dshift equals g and is left to the caller."""
    return g * (1.0 + scale), g * x


def gated_add(x, gate, y):
    """x + gate * y"""
    return x + gate * y


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def scale_add(x, v, c):
    """x + c * v for scalar c"""
    return x + c * v


def add_rowbcast(x, b):
    """(n, k) + (1, k)"""
    return x + b


def sum_rows(x):
    """Column sums as a (1, k) array."""
    return x.sum(axis=0, keepdims=True)


def batched_transpose(x, batch):
    """(batch*r, c) -> (batch*c, r), transposing each batch block."""
    n, c = x.shape
    r = n // batch
    return np.ascontiguousarray(
        x.reshape(batch, r, c).transpose(0, 2, 1).reshape(batch * c, r)
    )


def repeat_rows(x, k):
    """(n, d) -> (n*k, d), each row repeated k times consecutively."""
    return np.repeat(x, k, axis=0)


def sum_row_groups(x, k):
    """(n*k, d) -> (n, d), summing consecutive groups of k rows."""
    n, d = x.shape
    return x.reshape(n // k, k, d).sum(axis=1)
