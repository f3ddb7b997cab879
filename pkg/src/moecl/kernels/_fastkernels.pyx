# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels: tanh-GELU and the fused AdamW update.

Formulas and evaluation order match ``_numpy_kernels`` so the two
backends agree to roundoff.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, tanh, pow

cnp.import_array()

cdef double GELU_C = sqrt(2.0 / 3.14159265358979323846)
cdef double GELU_A = 0.044715


def gelu_forward(object x):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double u, xi
    for i in range(n):
        xi = xf[i]
        u = GELU_C * (xi + GELU_A * xi * xi * xi)
        out[i] = 0.5 * xi * (1.0 + tanh(u))
    return out.reshape(np.asarray(x).shape)


def gelu_backward(object x, object gout):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] gf = np.ascontiguousarray(gout, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double u, t, du, xi
    for i in range(n):
        xi = xf[i]
        u = GELU_C * (xi + GELU_A * xi * xi * xi)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
    return out.reshape(np.asarray(x).shape)


def adamw_step(cnp.ndarray param, cnp.ndarray grad, cnp.ndarray m, cnp.ndarray v,
               double lr, double beta1, double beta2, double eps,
               double weight_decay, long step):
    cdef cnp.ndarray[double, ndim=1] p = param.ravel()
    cdef cnp.ndarray[double, ndim=1] g = np.ascontiguousarray(grad, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] mf = m.ravel()
    cdef cnp.ndarray[double, ndim=1] vf = v.ravel()
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    cdef double mhat, vhat
    for i in range(n):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * g[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = mf[i] / bc1
        vhat = vf[i] / bc2
        p[i] -= lr * weight_decay * p[i]
        p[i] -= lr * mhat / (sqrt(vhat) + eps)
