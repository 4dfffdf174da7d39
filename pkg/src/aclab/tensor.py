"""Dense 2-D tensors with taped reverse-mode differentiation.

The op set is exactly what the project's networks need: matmul, bias add,
elementwise GELU, row-wise layernorm, conditioning modulation, gated
residual joins and a few data-movement primitives. Every op runs through
the selected kernel backend and, when a FlopsCounter is active, charges
matmul FLOPs (2*m*k*n) to the current scope. The backward of a matmul is
two matmuls, so taped backward costs exactly twice the forward in counted
FLOPs.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from .backend import kernels as K


class NonFiniteError(ValueError):
    """Raised when a value that must be finite contains NaN or Inf."""


class Tensor2:
    """A rows x cols float64 matrix, optionally tracked on a Tape."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Tensor2 requires a 2-D array, got shape {arr.shape}")
        self.data = arr

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def require_finite(self, context="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor2({self.rows}x{self.cols})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; replayed in reverse for VJPs."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out, inputs, backward))

    def reset(self):
        self.nodes.clear()
        self._consumed = False

    def backward(self, seeds):
        """Vector-Jacobian product of the recorded computation.

        seeds maps output tensors to cotangent arrays of matching shape.
        Returns a dict mapping every reached tensor (inputs and
        intermediates) to its adjoint. A second backward without reset()
        is an error.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; call reset() before reusing it")
        self._consumed = True
        grads = {}
        for t, g in seeds.items():
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.data.shape:
                raise ValueError(f"seed shape {g.shape} does not match output {t.data.shape}")
            grads[t] = g
        for node in reversed(self.nodes):
            g = grads.get(node.out)
            if g is None:
                continue
            for t, dg in zip(node.inputs, node.backward(g)):
                if dg is None:
                    continue
                held = grads.get(t)
                grads[t] = dg if held is None else held + dg
        return grads


def backward(tape, seeds):
    """Free-function alias for Tape.backward."""
    return tape.backward(seeds)


# --- FLOPs accounting -------------------------------------------------------

SCOPE_PREFILL = "prefill"
SCOPE_DENOISE = "denoise-loop"
SCOPE_RESIDUAL = "residual-head"

_ACTIVE = contextvars.ContextVar("aclab_flops", default=None)


class FlopsCounter:
    """Matmul FLOPs split by scope label and forward/backward direction."""

    def __init__(self):
        self.fwd = {}
        self.bwd = {}

    @property
    def forward_flops(self):
        return sum(self.fwd.values())

    @property
    def backward_flops(self):
        return sum(self.bwd.values())

    @property
    def total_flops(self):
        return self.forward_flops + self.backward_flops

    def scope_total(self, scope):
        return self.fwd.get(scope, 0) + self.bwd.get(scope, 0)

    def _add_fwd(self, scope, n):
        self.fwd[scope] = self.fwd.get(scope, 0) + n

    def _add_bwd(self, scope, n):
        self.bwd[scope] = self.bwd.get(scope, 0) + n

    @contextlib.contextmanager
    def scope(self, label):
        token = _ACTIVE.set((self, label))
        try:
            yield self
        finally:
            _ACTIVE.reset(token)


def _charge_fwd(flops):
    active = _ACTIVE.get()
    if active is not None:
        counter, scope = active
        counter._add_fwd(scope, flops)


def _charge_bwd(flops):
    active = _ACTIVE.get()
    if active is not None:
        counter, scope = active
        counter._add_bwd(scope, flops)


# --- primitive ops ----------------------------------------------------------


def matmul(a, b, tape=None):
    """Dense product of a (m x k) and b (k x n)."""
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.cols
    _charge_fwd(2 * m * k * n)
    out = Tensor2(K.matmul(a.data, b.data))
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g):
            _charge_bwd(4 * m * k * n)
            return K.matmul_nt(g, bd), K.matmul_tn(ad, g)

        tape.record(out, (a, b), bwd)
    return out


def add(a, b, tape=None):
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor2(K.add(a.data, b.data))
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def add_rowbcast(x, b, tape=None):
    """x (n x k) plus a broadcast (1 x k) row."""
    if b.rows != 1 or b.cols != x.cols:
        raise ValueError(f"row broadcast mismatch: {x.shape} + {b.shape}")
    out = Tensor2(K.add_rowbcast(x.data, b.data))
    if tape is not None:
        tape.record(out, (x, b), lambda g: (g, K.sum_rows(g)))
    return out


def mul(a, b, tape=None):
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor2(K.mul(a.data, b.data))
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (K.mul(g, bd), K.mul(g, ad)))
    return out


def scale_add(x, v, c, tape=None):
    """x + c*v for a python scalar c."""
    if x.shape != v.shape:
        raise ValueError(f"scale_add shape mismatch: {x.shape} vs {v.shape}")
    out = Tensor2(K.scale_add(x.data, v.data, float(c)))
    if tape is not None:
        tape.record(out, (x, v), lambda g: (g, c * g))
    return out


def gelu(x, tape=None):
    out = Tensor2(K.gelu(x.data))
    if tape is not None:
        xd = x.data
        tape.record(out, (x,), lambda g: (K.gelu_grad(xd, g),))
    return out


def layernorm(x, tape=None, eps=1e-6):
    """Row-wise standardization without learned affine."""
    y, rstd = K.layernorm(x.data, eps)
    out = Tensor2(y)
    if tape is not None:
        tape.record(out, (x,), lambda g: (K.layernorm_grad(y, rstd, g),))
    return out


def modulate(x, scale, shift, tape=None):
    """Conditioning modulation x*(1+scale)+shift; all three same shape."""
    if not (x.shape == scale.shape == shift.shape):
        raise ValueError("modulate shape mismatch")
    out = Tensor2(K.modulate(x.data, scale.data, shift.data))
    if tape is not None:
        xd, sd = x.data, scale.data

        def bwd(g):
            dx, dscale = K.modulate_grads(xd, sd, g)
            return dx, dscale, g

        tape.record(out, (x, scale, shift), bwd)
    return out


def gated_add(x, gate, y, tape=None):
    """Residual join x + gate*y."""
    if not (x.shape == gate.shape == y.shape):
        raise ValueError("gated_add shape mismatch")
    out = Tensor2(K.gated_add(x.data, gate.data, y.data))
    if tape is not None:
        gd, yd = gate.data, y.data
        tape.record(out, (x, gate, y), lambda g: (g, K.mul(g, yd), K.mul(g, gd)))
    return out


def batched_transpose(x, batch, tape=None):
    """(batch*r, c) -> (batch*c, r), transposing each block independently."""
    if x.rows % batch:
        raise ValueError(f"rows {x.rows} not divisible by batch {batch}")
    out = Tensor2(K.batched_transpose(x.data, batch))
    if tape is not None:
        tape.record(out, (x,), lambda g: (K.batched_transpose(g, batch),))
    return out


def repeat_rows(x, k, tape=None):
    """(n, d) -> (n*k, d) with each row repeated k times."""
    out = Tensor2(K.repeat_rows(x.data, k))
    if tape is not None:
        tape.record(out, (x,), lambda g: (K.sum_row_groups(g, k),))
    return out


def slice_cols(x, j0, j1, tape=None):
    """Column slice x[:, j0:j1]."""
    if not (0 <= j0 < j1 <= x.cols):
        raise ValueError(f"bad column slice [{j0}:{j1}] of {x.shape}")
    out = Tensor2(np.ascontiguousarray(x.data[:, j0:j1]))
    if tape is not None:
        shape = x.shape

        def bwd(g):
            dx = np.zeros(shape)
            dx[:, j0:j1] = g
            return (dx,)

        tape.record(out, (x,), bwd)
    return out
