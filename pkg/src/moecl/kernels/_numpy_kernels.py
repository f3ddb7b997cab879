"""Pure-numpy implementations of the hot elementwise kernels.

These are the fallback when the compiled extension is unavailable; the
Cython versions in ``_fastkernels.pyx`` compute the same formulas in the
same order so both backends agree to floating-point roundoff.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_forward(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x, gout):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def adamw_step(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place decoupled-weight-decay adaptive-moment update."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * weight_decay * param
    param -= lr * mhat / (np.sqrt(vhat) + eps)
