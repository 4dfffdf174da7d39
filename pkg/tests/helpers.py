"""Shared test utilities: finite-difference gradient checks."""

from __future__ import annotations

import numpy as np


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def directional_gradcheck(f, arrays, grads, rng, n_dirs=20, eps=1e-5, tol=1e-5):
    """Compare <grad, u> against central differences along random directions.

    f() evaluates the scalar at the current contents of `arrays`; `grads`
    are the analytic gradients w.r.t. each array. Arrays are perturbed in
    place and restored. Returns the worst relative error seen.
    """
    worst = 0.0
    backups = [a.copy() for a in arrays]
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        for a, d in zip(arrays, dirs):
            a += eps * d
        f_plus = f()
        for a, b, d in zip(arrays, backups, dirs):
            a[...] = b - eps * d
        f_minus = f()
        for a, b in zip(arrays, backups):
            a[...] = b
        numeric = (f_plus - f_minus) / (2 * eps)
        err = rel_err(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"directional gradient error {err:.3e} exceeds {tol}"
    return worst
