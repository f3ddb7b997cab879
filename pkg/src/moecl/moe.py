"""Mixture of low-rank adapter experts with incremental task routers.

Each layer owns a fixed pool of rank-r adapters (experts), one linear
router per learned task, per-task activation tallies, and a monotonically
growing set of frozen expert ids. Gating is sparse top-k: the k highest
router logits are renormalized by softmax over the selected set and every
other expert contributes exactly zero.
"""

from __future__ import annotations

import numpy as np

from .errors import TaskError
from .tensor import Tensor, matmul, reshape, softmax, slice_col

EXPERT_INIT_STD = 0.02
ROUTER_INIT_STD = 0.02


class Expert:
    """Low-rank residual transform x -> (x @ A) @ B, zero at init (B = 0)."""

    def __init__(self, expert_id, dim, rank, rng):
        self.id = expert_id
        self.a = Tensor(EXPERT_INIT_STD * rng.standard_normal((dim, rank)),
                        requires_grad=True)
        self.b = Tensor(np.zeros((rank, dim)), requires_grad=True)
        self.frozen = False

    def forward(self, x):
        return matmul(matmul(x, self.a), self.b)

    def freeze(self):
        self.frozen = True
        self.a.requires_grad = False
        self.b.requires_grad = False


class Router:
    """Per-task linear map from the routing token to expert logits."""

    def __init__(self, task_id, dim, n_experts, rng):
        self.task_id = task_id
        self.w = Tensor(ROUTER_INIT_STD * rng.standard_normal((dim, n_experts)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_experts), requires_grad=True)

    def logits(self, cls):
        squeeze = cls.data.ndim == 1
        c = reshape(cls, (1, -1)) if squeeze else cls
        out = matmul(c, self.w) + self.b
        return reshape(out, (self.w.data.shape[1],)) if squeeze else out


def topk_indices(logits_row, k):
    """Indices of the k largest logits; ties resolved toward lower id."""
    n = len(logits_row)
    k = min(k, n)
    order = np.lexsort((np.arange(n), -logits_row))
    return np.sort(order[:k])


class MoeLayer:
    def __init__(self, dim, n_experts=22, rank=4, k=2, seed=0):
        self.dim = dim
        self.n_experts = n_experts
        self.rank = rank
        self.k = k
        self._seed = seed
        rng = np.random.default_rng(seed)
        self.experts = [Expert(i, dim, rank, rng) for i in range(n_experts)]
        self.routers = {}
        self.frozen_set = set()
        self.activation_counts = {}

    # -- routing ------------------------------------------------------------

    def add_task_router(self, task_id, seed=None):
        if task_id in self.routers:
            raise TaskError(f"router for task {task_id} already exists")
        rng = np.random.default_rng(
            self._seed + 7919 * (task_id + 1) if seed is None else seed
        )
        router = Router(task_id, self.dim, self.n_experts, rng)
        self.routers[task_id] = router
        self.activation_counts[task_id] = np.zeros(self.n_experts, dtype=np.int64)
        return router

    def route(self, task_id, cls):
        """Gate weights for a single routing token: [n_experts] Tensor."""
        if task_id not in self.routers:
            raise TaskError(f"no router for task {task_id}")
        logits = self.routers[task_id].logits(cls)
        selected = topk_indices(logits.data, self.k)
        excluded = set(range(self.n_experts)) - set(int(i) for i in selected)
        return softmax(logits, mask=excluded)

    def _route_batch(self, task_id, cls):
        if task_id not in self.routers:
            raise TaskError(f"no router for task {task_id}")
        logits = self.routers[task_id].logits(cls)
        excluded = np.ones(logits.data.shape, dtype=bool)
        for row in range(logits.data.shape[0]):
            excluded[row, topk_indices(logits.data[row], self.k)] = False
        return softmax(logits, mask=excluded), ~excluded

    # -- forward ------------------------------------------------------------

    def forward_delta(self, x, cls, task_id, training=False):
        """Gated expert sum over tokens x [B, n, d]; sparse execution.

        Only selected experts run; in training mode each selection bumps
        the active task's tally by one per sample.
        """
        weights, selected = self._route_batch(task_id, cls)
        if training:
            self.activation_counts[task_id] += selected.sum(axis=0)
        out = None
        for i in np.flatnonzero(selected.any(axis=0)):
            wi = reshape(slice_col(weights, int(i)), (-1, 1, 1))
            term = wi * self.experts[i].forward(x)
            out = term if out is None else out + term
        return out

    # -- activate-freeze ------------------------------------------------------

    def freeze_top_activated(self, task_id):
        """Freeze this task's k most-activated unfrozen experts.

        Zero-count experts are never frozen; ties resolve to lower id.
        Returns the newly frozen ids.
        """
        if task_id not in self.activation_counts:
            raise TaskError(f"no activation record for task {task_id}")
        counts = self.activation_counts[task_id]
        candidates = [
            i for i in range(self.n_experts)
            if i not in self.frozen_set and counts[i] > 0
        ]
        candidates.sort(key=lambda i: (-counts[i], i))
        newly = candidates[: self.k]
        for i in newly:
            self.experts[i].freeze()
            self.frozen_set.add(i)
        return newly

    def trainable_parameters(self, task_id):
        """Task router params plus every unfrozen expert's matrices."""
        if task_id not in self.routers:
            raise TaskError(f"no router for task {task_id}")
        router = self.routers[task_id]
        params = [router.w, router.b]
        for e in self.experts:
            if not e.frozen:
                params.extend([e.a, e.b])
        return params

    # -- reporting / persistence ----------------------------------------------

    def activation_rows(self, label):
        """(layer, task, expert, count, frequency) rows for the heatmap CSV."""
        rows = []
        for task_id in sorted(self.activation_counts):
            counts = self.activation_counts[task_id]
            total = counts.sum()
            forwards = total / self.k if total else 0
            for i in range(self.n_experts):
                freq = counts[i] / forwards if forwards else 0.0
                rows.append((label, task_id, i, int(counts[i]), freq))
        return rows

    def state_arrays(self, prefix):
        arrays = {}
        for e in self.experts:
            arrays[f"{prefix}.expert{e.id}.a"] = e.a.data
            arrays[f"{prefix}.expert{e.id}.b"] = e.b.data
        for tid in sorted(self.routers):
            arrays[f"{prefix}.router{tid}.w"] = self.routers[tid].w.data
            arrays[f"{prefix}.router{tid}.b"] = self.routers[tid].b.data
            arrays[f"{prefix}.counts{tid}"] = self.activation_counts[tid].astype(
                np.float64
            )
        arrays[f"{prefix}.frozen"] = np.array(sorted(self.frozen_set), dtype=np.float64)
        return arrays


class SharedAdapterLayer:
    """Baseline socket: one adapter, weight 1, no router, never frozen."""

    def __init__(self, dim, rank=4, seed=0):
        rng = np.random.default_rng(seed)
        self.expert = Expert(0, dim, rank, rng)

    def forward_delta(self, x, cls, task_id, training=False):
        return self.expert.forward(x)

    def trainable_parameters(self, task_id=None):
        return [self.expert.a, self.expert.b]
