"""AdamW: adaptive moments with decoupled weight decay."""

import numpy as np

from . import kernels
from .errors import NonFiniteError


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        for p in self.params:
            # the compiled kernel updates through a ravel() view
            p.data = np.ascontiguousarray(p.data)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        """One update over all trainable params; frozen params are skipped.

        Raises before touching anything if any gradient is non-finite, so
        an aborted step leaves parameters and moments unchanged.
        """
        for p in self.params:
            if p.requires_grad and p.grad is not None and not np.all(
                np.isfinite(p.grad)
            ):
                raise NonFiniteError("non-finite gradient; step aborted")
        self.step_count += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.requires_grad:
                continue
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            kernels.adamw_step(
                p.data, grad, m, v, self.lr, self.beta1, self.beta2,
                self.eps, self.weight_decay, self.step_count,
            )
