"""Synthetic multi-domain task streams and on-disk dataset format.

Samples are token grids (one d-dim vector per patch) drawn from Gaussian
clusters. Each class carries a descriptor vector (its generating mean),
which plays the role of the class name consumed by the text tower, so a
pretrained backbone can classify classes it never saw.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

MAGIC = b"MCLD1"

PRETEXT_CLASS_BASE = 10_000


@dataclass
class SyntheticTaskSpec:
    task_id: int
    num_classes: int = 4
    train_per_class: int = 100
    eval_per_class: int = 50
    noise_scale: float = 1.0
    class_spread: float = 3.0


@dataclass
class Task:
    task_id: int
    class_ids: list  # global ids, disjoint across tasks
    descriptors: np.ndarray  # [M, dim] per-class descriptor vectors
    train_x: np.ndarray  # [N, patches, dim]
    train_y: np.ndarray  # [N] global class ids
    eval_x: np.ndarray
    eval_y: np.ndarray

    @property
    def num_classes(self):
        return len(self.class_ids)

    def local_labels(self, y):
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup[int(v)] for v in y], dtype=np.int64)


@dataclass
class TaskStream:
    tasks: list
    dim: int
    patches: int
    noise_scale: float
    task_directions: np.ndarray = field(default=None, repr=False)
    separation: float = 6.0


@dataclass
class ReferenceSet:
    """Broad-support pretraining/reference distribution."""

    samples: np.ndarray  # [N, patches, dim]
    labels: np.ndarray  # pretext class ids
    class_ids: list
    descriptors: np.ndarray
    holdout_class_ids: list
    holdout_descriptors: np.ndarray
    holdout_samples: np.ndarray
    holdout_labels: np.ndarray
    dim: int
    patches: int


def _orthonormal_directions(rng, dim, count):
    m = rng.standard_normal((dim, count))
    q, _ = np.linalg.qr(m)
    return q.T  # [count, dim] orthonormal rows


def _sample_class(rng, mean, sigma, patches, count):
    return mean[None, None, :] + sigma * rng.standard_normal(
        (count, patches, mean.shape[0])
    )


def generate_stream(specs, seed, dim=32, patches=16, separation=6.0):
    """Deterministic Gaussian-cluster stream with disjoint label spaces."""
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate task ids in stream spec: {ids}")
    if not specs:
        raise DataError("empty stream spec")
    rng = np.random.default_rng(seed)
    sigma = max(s.noise_scale for s in specs)
    # one direction per task plus one spare kept for out-of-distribution probes
    dirs = _orthonormal_directions(rng, dim, len(specs) + 1)
    tasks = []
    next_class = 0
    for t_idx, spec in enumerate(specs):
        shift = separation * sigma * dirs[t_idx]
        class_ids = list(range(next_class, next_class + spec.num_classes))
        next_class += spec.num_classes
        descriptors = np.empty((spec.num_classes, dim))
        train_parts, eval_parts = [], []
        train_labels, eval_labels = [], []
        for j, cid in enumerate(class_ids):
            u = rng.standard_normal(dim)
            u /= np.linalg.norm(u)
            mean = shift + spec.class_spread * spec.noise_scale * u
            descriptors[j] = mean
            train_parts.append(
                _sample_class(rng, mean, spec.noise_scale, patches,
                              spec.train_per_class)
            )
            eval_parts.append(
                _sample_class(rng, mean, spec.noise_scale, patches,
                              spec.eval_per_class)
            )
            train_labels.append(np.full(spec.train_per_class, cid, dtype=np.int64))
            eval_labels.append(np.full(spec.eval_per_class, cid, dtype=np.int64))
        tasks.append(Task(
            task_id=spec.task_id,
            class_ids=class_ids,
            descriptors=descriptors,
            train_x=np.concatenate(train_parts),
            train_y=np.concatenate(train_labels),
            eval_x=np.concatenate(eval_parts),
            eval_y=np.concatenate(eval_labels),
        ))
    return TaskStream(tasks=tasks, dim=dim, patches=patches,
                      noise_scale=sigma, task_directions=dirs,
                      separation=separation)


def default_stream_specs(num_tasks=5, num_classes=4, train_per_class=100,
                         eval_per_class=50):
    return [
        SyntheticTaskSpec(task_id=t + 1, num_classes=num_classes,
                          train_per_class=train_per_class,
                          eval_per_class=eval_per_class)
        for t in range(num_tasks)
    ]


def generate_reference(seed, size, dim=32, patches=16, num_classes=8,
                       holdout_classes=4, noise_scale=1.5, radius=8.0):
    """Broad mixture with pretext classes disjoint from all task classes.

    The per-class noise and the spread of class means both exceed the
    task defaults, so the reference support is wider than any single task.
    """
    if size <= 0:
        raise DataError("reference size must be positive")
    rng = np.random.default_rng(seed)
    total = num_classes + holdout_classes
    means = rng.standard_normal((total, dim))
    means *= (radius * rng.uniform(0.2, 1.0, size=(total, 1))
              / np.linalg.norm(means, axis=1, keepdims=True))
    per_class = max(1, size // num_classes)

    def build(class_range, count):
        xs, ys = [], []
        for j in class_range:
            xs.append(_sample_class(rng, means[j], noise_scale, patches, count))
            ys.append(np.full(count, PRETEXT_CLASS_BASE + j, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    samples, labels = build(range(num_classes), per_class)
    hold_x, hold_y = build(range(num_classes, total), max(20, per_class // 2))
    return ReferenceSet(
        samples=samples,
        labels=labels,
        class_ids=[PRETEXT_CLASS_BASE + j for j in range(num_classes)],
        descriptors=means[:num_classes].copy(),
        holdout_class_ids=[PRETEXT_CLASS_BASE + j
                           for j in range(num_classes, total)],
        holdout_descriptors=means[num_classes:].copy(),
        holdout_samples=hold_x,
        holdout_labels=hold_y,
        dim=dim,
        patches=patches,
    )


def generate_ood_probe(stream, seed, size=200, distance=10.0):
    """Samples at a configurable sigma-distance from every task mean."""
    rng = np.random.default_rng(seed)
    spare = stream.task_directions[-1]
    mean = -distance * stream.noise_scale * spare
    return _sample_class(rng, mean, stream.noise_scale, stream.patches, size)


def few_shot_subsample(task, shots, seed):
    """Keep exactly `shots` training samples per class; eval untouched."""
    if shots < 1:
        raise DataError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    for cid in task.class_ids:
        idx = np.flatnonzero(task.train_y == cid)
        if len(idx) < shots:
            raise DataError(
                f"class {cid} has {len(idx)} samples; {shots} requested"
            )
        keep.append(rng.choice(idx, size=shots, replace=False))
    keep = np.sort(np.concatenate(keep))
    return replace(task, train_x=task.train_x[keep].copy(),
                   train_y=task.train_y[keep].copy())


# -- MCLD1 container -------------------------------------------------------


def save_dataset(path, features, labels):
    features = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if features.ndim != 3 or len(labels) != len(features):
        raise DataError("features must be [N, patches, dim] with one label each")
    classes = np.unique(labels)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqqq", features.shape[1], features.shape[2],
                             len(classes), len(features)))
        fh.write(features.tobytes())
        fh.write(labels.tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise DataError(f"bad magic in {path!r}")
    patches, dim, n_classes, n = struct.unpack("<qqqq", blob[5:37])
    feat_bytes = n * patches * dim * 8
    expected = 37 + feat_bytes + n * 8
    if len(blob) != expected:
        raise DataError(
            f"truncated or oversized dataset file: {len(blob)} != {expected}"
        )
    features = np.frombuffer(blob[37:37 + feat_bytes]).reshape(n, patches, dim)
    labels = np.frombuffer(blob[37 + feat_bytes:], dtype=np.int64)
    if len(np.unique(labels)) != n_classes:
        raise DataError("class count in header disagrees with payload")
    return features.copy(), labels.copy()
