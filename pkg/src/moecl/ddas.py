"""Distribution-discriminative routing via per-task autoencoders.

Each learned task gets a bottlenecked autoencoder over frozen backbone
features; an input's reconstruction score under an autoencoder estimates
how likely it belongs to that task. A reference autoencoder (id 0) is
trained on the broad reference distribution before any task arrives. If
every task score exceeds the threshold the input is treated as unseen and
routed to the frozen backbone's zero-shot path; otherwise it goes to the
task with the lowest score (ties to the lower task id).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, TaskError
from .optim import AdamW
from .tensor import Tensor, matmul, mse, relu, tsum

REFERENCE_ID = 0

_LOSS_KINDS = ("mse", "mae", "smooth_l1")


class TaskAutoencoder:
    """linear -> ReLU -> linear with a lossy bottleneck."""

    def __init__(self, task_id, feature_dim, bottleneck, rng):
        if bottleneck >= feature_dim:
            raise DataError("bottleneck must be smaller than the feature dim")
        self.task_id = task_id
        self.w1 = Tensor(rng.standard_normal((feature_dim, bottleneck))
                         / np.sqrt(feature_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(bottleneck), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((bottleneck, feature_dim))
                         / np.sqrt(bottleneck), requires_grad=True)
        self.b2 = Tensor(np.zeros(feature_dim), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def reconstruct(self, features):
        h = relu(matmul(features, self.w1) + self.b1)
        return matmul(h, self.w2) + self.b2

    def scores(self, features):
        """Per-row mean-squared reconstruction error, as a numpy array."""
        f = np.asarray(features, dtype=np.float64)
        recon = self.reconstruct(Tensor(f)).data
        return ((f - recon) ** 2).mean(axis=-1)

    def state_arrays(self, prefix):
        return {
            f"{prefix}.w1": self.w1.data, f"{prefix}.b1": self.b1.data,
            f"{prefix}.w2": self.w2.data, f"{prefix}.b2": self.b2.data,
        }


@dataclass
class RoutingDecision:
    kind: str  # "zero_shot" or "task"
    task_id: int | None
    scores: np.ndarray
    task_ids: tuple


class DdasBank:
    def __init__(self, feature_fn, feature_dim, bottleneck=None, seed=0,
                 loss="mse"):
        """`feature_fn` maps raw sample batches to frozen [B, d_f] features."""
        if loss not in _LOSS_KINDS:
            raise DataError(f"loss must be one of {_LOSS_KINDS}")
        self.feature_fn = feature_fn
        self.feature_dim = feature_dim
        self.bottleneck = bottleneck or max(2, feature_dim // 4)
        self.loss = loss
        self._seed = seed
        self.autoencoders = {}
        self.threshold = None

    # -- features ---------------------------------------------------------

    def extract_features(self, samples):
        if self.feature_fn is None:
            raise DataError("feature source not initialized")
        f = np.asarray(self.feature_fn(samples), dtype=np.float64)
        if f.shape[-1] != self.feature_dim:
            raise DataError(
                f"feature source produced dim {f.shape[-1]}, "
                f"expected {self.feature_dim}"
            )
        return f

    @property
    def task_ids(self):
        return tuple(sorted(t for t in self.autoencoders if t != REFERENCE_ID))

    # -- training -----------------------------------------------------------

    def make_autoencoder(self, task_id):
        if task_id in self.autoencoders:
            raise TaskError(f"autoencoder for task {task_id} already exists")
        rng = np.random.default_rng(self._seed + 104729 * (task_id + 1))
        ae = TaskAutoencoder(task_id, self.feature_dim, self.bottleneck, rng)
        self.autoencoders[task_id] = ae
        return ae

    def _loss(self, recon, target):
        if self.loss == "mse":
            return mse(recon, target, reduction="mean")
        diff_data = recon.data - np.asarray(target.data)
        if self.loss == "mae":
            grad = np.sign(diff_data) / diff_data.size
            value = np.abs(diff_data).mean()
        else:  # smooth_l1
            small = np.abs(diff_data) < 1.0
            grad = np.where(small, diff_data, np.sign(diff_data)) / diff_data.size
            value = np.where(small, 0.5 * diff_data**2,
                             np.abs(diff_data) - 0.5).mean()
        # exact value with the loss's (sub)gradient attached linearly
        lin = Tensor(grad) * (recon - Tensor(recon.data))
        return tsum(lin) + Tensor(np.asarray(value))

    def train_autoencoder(self, task_id, samples, iterations, batch_size=64,
                          lr=1e-3, features=None):
        """Fit one task's autoencoder; returns (autoencoder, final mean score)."""
        if len(samples) == 0 and features is None:
            raise DataError("empty image set")
        ae = self.make_autoencoder(task_id)
        feats = self.extract_features(samples) if features is None else features
        if len(feats) == 0:
            raise DataError("empty image set")
        if iterations > 0:
            rng = np.random.default_rng(self._seed + 15485863 * (task_id + 2))
            opt = AdamW(ae.parameters(), lr=lr)
            for _ in range(iterations):
                idx = rng.integers(0, len(feats), size=min(batch_size, len(feats)))
                batch = Tensor(feats[idx])
                loss = self._loss(ae.reconstruct(batch), batch)
                opt.zero_grad()
                loss.backward()
                opt.step()
        return ae, float(ae.scores(feats).mean())

    # -- scoring and selection ---------------------------------------------

    def score_all(self, samples=None, features=None):
        """[B, T] matrix of per-task reconstruction scores (reference excluded)."""
        if not self.task_ids:
            raise TaskError("no task autoencoders trained")
        feats = self.extract_features(samples) if features is None else features
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        return np.stack(
            [self.autoencoders[t].scores(feats) for t in self.task_ids], axis=-1
        )

    def select(self, scores):
        """Threshold routing for one score vector."""
        if self.threshold is None:
            raise DataError("threshold not calibrated")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            raise DataError("empty score vector")
        if scores.min() > self.threshold:
            return RoutingDecision("zero_shot", None, scores, self.task_ids)
        best = int(np.argmin(scores))  # argmin takes the first = lowest task id
        return RoutingDecision("task", self.task_ids[best], scores, self.task_ids)

    def select_batch(self, scores):
        """Vectorized select over [B, T] scores; returns route ids, -1 = zero-shot."""
        scores = np.atleast_2d(scores)
        ids = np.asarray(self.task_ids)
        routes = ids[np.argmin(scores, axis=1)]
        routes[scores.min(axis=1) > self.threshold] = -1
        return routes

    def calibrate_threshold(self, held_out_scores, quantile=0.95):
        """Nearest-rank quantile of pooled own-task held-out scores."""
        pooled = np.sort(np.concatenate([np.asarray(s).ravel()
                                         for s in held_out_scores]))
        if pooled.size == 0:
            raise DataError("empty held-out score set")
        if not 0.0 <= quantile <= 1.0:
            raise DataError("quantile must lie in [0, 1]")
        rank = min(pooled.size - 1, max(0, int(np.ceil(quantile * pooled.size)) - 1))
        self.threshold = float(pooled[rank])
        return self.threshold

    def state_arrays(self):
        arrays = {"ddas.meta": np.array(
            [self.feature_dim, self.bottleneck,
             -1.0 if self.threshold is None else self.threshold]
        )}
        for tid in sorted(self.autoencoders):
            arrays.update(self.autoencoders[tid].state_arrays(f"ddas.ae{tid}"))
        return arrays


def sweep_threshold(bank, grid, eval_fn):
    """Evaluate the full system at each threshold in `grid`.

    `eval_fn()` is called with the bank's threshold already set and must
    return a dict of metrics; each row echoes the threshold.
    """
    grid = list(grid)
    if not grid:
        raise DataError("empty threshold grid")
    original = bank.threshold
    rows = []
    try:
        for thres in grid:
            bank.threshold = float(thres)
            row = {"threshold": float(thres)}
            row.update(eval_fn())
            rows.append(row)
    finally:
        bank.threshold = original
    return rows
