# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core.

Same API as aclab._kernels_np; plain C loops over C-contiguous float64
arrays. The matmuls here beat BLAS-backed NumPy at the tiny batch-1 sizes
the episode simulator runs, which is where sweep time goes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, tanh

cnp.import_array()

NAME = "compiled"

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n))
    cdef double[:, ::1] c = out_arr
    cdef Py_ssize_t i, p, j
    cdef double aip
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]
    return out_arr


def matmul_nt(double[:, ::1] a, double[:, ::1] b):
    """a @ b.T"""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out_arr = np.empty((m, n))
    cdef double[:, ::1] c = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            c[i, j] = acc
    return out_arr


def matmul_tn(double[:, ::1] a, double[:, ::1] b):
    """a.T @ b"""
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n))
    cdef double[:, ::1] c = out_arr
    cdef Py_ssize_t p, i, j
    cdef double api
    for p in range(k):
        for i in range(m):
            api = a[p, i]
            for j in range(n):
                c[i, j] += api * b[p, j]
    return out_arr


def gelu(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out_arr


def gelu_grad(double[:, ::1] x, double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] dx = out_arr
    cdef Py_ssize_t i, j
    cdef double v, t, du
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            dx[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out_arr


def layernorm(double[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    y_arr = np.empty((n, m))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, dv, r
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            dv = x[i, j] - mu
            var += dv * dv
        var /= m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            y[i, j] = (x[i, j] - mu) * r
    return y_arr, rstd_arr


def layernorm_grad(double[:, ::1] y, double[::1] rstd, double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] dx = out_arr
    cdef Py_ssize_t i, j
    cdef double gm, gym
    for i in range(n):
        gm = 0.0
        gym = 0.0
        for j in range(m):
            gm += g[i, j]
            gym += g[i, j] * y[i, j]
        gm /= m
        gym /= m
        for j in range(m):
            dx[i, j] = (g[i, j] - gm - y[i, j] * gym) * rstd[i]
    return out_arr


def modulate(double[:, ::1] x, double[:, ::1] scale, double[:, ::1] shift):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            y[i, j] = x[i, j] * (1.0 + scale[i, j]) + shift[i, j]
    return out_arr


def modulate_grads(double[:, ::1] x, double[:, ::1] scale, double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    dx_arr = np.empty((n, m))
    ds_arr = np.empty((n, m))
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] ds = ds_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            dx[i, j] = g[i, j] * (1.0 + scale[i, j])
            ds[i, j] = g[i, j] * x[i, j]
    return dx_arr, ds_arr


def gated_add(double[:, ::1] x, double[:, ::1] gate, double[:, ::1] y):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            o[i, j] = x[i, j] + gate[i, j] * y[i, j]
    return out_arr


def add(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            o[i, j] = a[i, j] + b[i, j]
    return out_arr


def mul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            o[i, j] = a[i, j] * b[i, j]
    return out_arr


def scale_add(double[:, ::1] x, double[:, ::1] v, double c):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            o[i, j] = x[i, j] + c * v[i, j]
    return out_arr


def add_rowbcast(double[:, ::1] x, double[:, ::1] b):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            o[i, j] = x[i, j] + b[0, j]
    return out_arr


def sum_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.zeros((1, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            o[0, j] += x[i, j]
    return out_arr


def batched_transpose(double[:, ::1] x, Py_ssize_t batch):
    cdef Py_ssize_t rows = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t r = rows // batch
    out_arr = np.empty((batch * c, r))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t b, i, j
    for b in range(batch):
        for i in range(r):
            for j in range(c):
                o[b * c + j, i] = x[b * r + i, j]
    return out_arr


def repeat_rows(double[:, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n * k, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, r, j
    for i in range(n):
        for r in range(k):
            for j in range(m):
                o[i * k + r, j] = x[i, j]
    return out_arr


def sum_row_groups(double[:, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t rows = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t n = rows // k
    out_arr = np.zeros((n, m))
    cdef double[:, ::1] o = out_arr
    cdef Py_ssize_t i, r, j
    for i in range(n):
        for r in range(k):
            for j in range(m):
                o[i, j] += x[i * k + r, j]
    return out_arr
