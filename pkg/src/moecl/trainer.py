"""Sequential continual-learning driver.

Trains one task at a time: routers/experts through smoothed cross-entropy
over cosine logits, the task's autoencoder interleaved on the same images,
activate-freeze at each task boundary, and task-agnostic evaluation in
which the autoencoder bank picks the route per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .backbone import LOGIT_SCALE
from .data import few_shot_subsample
from .ddas import DdasBank, REFERENCE_ID
from .errors import DataError, TaskError
from .metrics import EvalMatrix, aggregate, cil_aggregate
from .moe import MoeLayer, SharedAdapterLayer
from .optim import AdamW
from .tensor import Tensor, cross_entropy_smoothed, matmul, transpose

ZERO_SHOT_ROUTE = -1


@dataclass
class MoeConfig:
    n_experts: int = 22
    k: int = 2
    rank: int = 4


@dataclass
class DdasConfig:
    bottleneck: int = 0  # 0 -> feature_dim // 4
    reference_iterations: int = 300
    task_iterations: int = 200
    quantile: float = 0.95
    fixed_threshold: float = 0.0  # 0 -> quantile calibration
    loss: str = "mse"
    feature_source: str = "backbone"  # or "random_projection"
    schedule: str = "interleaved"  # or "after"


@dataclass
class TrainConfig:
    iterations: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    label_smoothing: float = 0.1
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    mode: str = "mtil"  # mtil | fewshot | cil
    shots: int = 5
    cil_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise DataError("iterations must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise DataError("label smoothing must lie in [0, 1)")
        if self.mode == "fewshot" and self.shots < 1:
            raise DataError("shots must be >= 1 in few-shot mode")


class ContinualModel:
    """Frozen backbone plus one adapter layer per (tower, block)."""

    def __init__(self, backbone, moe_cfg=None, seed=0, shared_adapter=False):
        self.backbone = backbone
        self.moe_cfg = moe_cfg or MoeConfig()
        g = backbone.geometry
        if shared_adapter:
            self.image_layers = [
                SharedAdapterLayer(g.width, self.moe_cfg.rank, seed + 31 * b)
                for b in range(g.depth)
            ]
            self.text_layer = SharedAdapterLayer(g.width, self.moe_cfg.rank,
                                                 seed + 977)
        else:
            self.image_layers = [
                MoeLayer(g.width, self.moe_cfg.n_experts, self.moe_cfg.rank,
                         self.moe_cfg.k, seed=seed + 31 * b)
                for b in range(g.depth)
            ]
            self.text_layer = MoeLayer(g.width, self.moe_cfg.n_experts,
                                       self.moe_cfg.rank, self.moe_cfg.k,
                                       seed=seed + 977)
        self.shared_adapter = shared_adapter

    def labeled_layers(self):
        return [
            (f"image.{b}", layer) for b, layer in enumerate(self.image_layers)
        ] + [("text.0", self.text_layer)]

    def add_task(self, task_id):
        if self.shared_adapter:
            return
        for _, layer in self.labeled_layers():
            layer.add_task_router(task_id)

    def encode_image(self, x, task_id=None, training=False):
        sockets = self.image_layers if task_id is not None or self.shared_adapter \
            else None
        return self.backbone.encode_image(x, sockets=sockets, task=task_id,
                                          training=training)

    def encode_text(self, class_ids, task_id=None, training=False):
        socket = self.text_layer if task_id is not None or self.shared_adapter \
            else None
        return self.backbone.encode_text(class_ids, socket=socket, task=task_id,
                                         training=training)

    def trainable_parameters(self, task_id):
        params = []
        for _, layer in self.labeled_layers():
            params.extend(layer.trainable_parameters(task_id))
        return params

    def freeze_after_task(self, task_id):
        if self.shared_adapter:
            return {}
        return {
            label: layer.freeze_top_activated(task_id)
            for label, layer in self.labeled_layers()
        }

    def activation_rows(self):
        rows = []
        if not self.shared_adapter:
            for label, layer in self.labeled_layers():
                rows.extend(layer.activation_rows(label))
        return rows

    def state_arrays(self):
        arrays = {}
        if not self.shared_adapter:
            for label, layer in self.labeled_layers():
                arrays.update(layer.state_arrays(f"moe.{label}"))
        return arrays


def make_feature_fn(backbone, ddas_cfg, seed=0):
    """Frozen feature source for the autoencoder bank."""
    if ddas_cfg.feature_source == "backbone":
        def fn(samples, chunk=128):
            parts = [
                backbone.encode_image(samples[lo:lo + chunk]).data
                for lo in range(0, len(samples), chunk)
            ]
            return np.concatenate(parts)

        return fn, backbone.geometry.width
    if ddas_cfg.feature_source == "random_projection":
        g = backbone.geometry
        rng = np.random.default_rng(seed + 424243)
        proj = rng.standard_normal((g.width, g.width)) / np.sqrt(g.width)

        def fn(samples):
            flat = np.asarray(samples).mean(axis=1)  # mean over patches
            return flat @ proj

        return fn, g.width
    raise DataError(f"unknown feature source {ddas_cfg.feature_source!r}")


def make_bank(backbone, ddas_cfg, reference=None, seed=0):
    """Bank with the reference autoencoder fitted on the reference set."""
    fn, dim = make_feature_fn(backbone, ddas_cfg, seed)
    bank = DdasBank(fn, dim, bottleneck=ddas_cfg.bottleneck or None,
                    seed=seed, loss=ddas_cfg.loss)
    if reference is not None:
        bank.train_autoencoder(REFERENCE_ID, reference.samples,
                               ddas_cfg.reference_iterations)
    return bank


def train_task(model, bank, task, cfg, ddas_cfg=None, calibration_store=None):
    """Train routers/experts and the task autoencoder on one task."""
    if len(task.train_x) == 0:
        raise DataError("empty task data")
    ddas_cfg = ddas_cfg or DdasConfig()
    rng = np.random.default_rng(cfg.seed + 6151 * (task.task_id + 1))
    class_ids = sorted(task.class_ids)
    lookup = {c: i for i, c in enumerate(class_ids)}
    targets = np.array([lookup[int(v)] for v in task.train_y], dtype=np.int64)
    n = len(task.train_x)

    opt = AdamW(model.trainable_parameters(task.task_id), lr=cfg.lr,
                betas=cfg.betas, weight_decay=cfg.weight_decay)

    ae = ae_opt = ae_feats = None
    final_score = None
    if bank is not None:
        # hold out a calibration slice the autoencoder never trains on
        perm = rng.permutation(n)
        n_cal = max(1, n // 10)
        cal_idx, fit_idx = perm[:n_cal], perm[n_cal:]
        feats = bank.extract_features(task.train_x)
        ae = bank.make_autoencoder(task.task_id)
        ae_opt = AdamW(ae.parameters(), lr=1e-3)
        ae_feats = feats[fit_idx]
        if calibration_store is not None:
            calibration_store[task.task_id] = feats[cal_idx]

    def ae_step(step_rng):
        idx = step_rng.integers(0, len(ae_feats),
                                size=min(cfg.batch_size, len(ae_feats)))
        batch = Tensor(ae_feats[idx])
        loss = bank._loss(ae.reconstruct(batch), batch)
        ae_opt.zero_grad()
        loss.backward()
        ae_opt.step()

    ae_rng = np.random.default_rng(cfg.seed + 887 * (task.task_id + 1))
    ae_steps_left = ddas_cfg.task_iterations if ae is not None else 0

    final_loss = None
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        img = model.encode_image(task.train_x[idx], task.task_id, training=True)
        txt = model.encode_text(class_ids, task.task_id, training=True)
        logits = matmul(img, transpose(txt)) * LOGIT_SCALE
        loss = cross_entropy_smoothed(logits, targets[idx], cfg.label_smoothing)
        opt.zero_grad()
        loss.backward()
        opt.step()
        final_loss = loss.item()
        if ae_steps_left > 0 and ddas_cfg.schedule == "interleaved":
            ae_step(ae_rng)
            ae_steps_left -= 1
    while ae_steps_left > 0:
        ae_step(ae_rng)
        ae_steps_left -= 1

    if ae is not None:
        final_score = float(ae.scores(ae_feats).mean())

    # train accuracy with the task-oracle route
    correct = 0
    txt = model.encode_text(class_ids, task.task_id).data
    for lo in range(0, n, 128):
        emb = model.encode_image(task.train_x[lo:lo + 128], task.task_id).data
        _, pred = model.backbone.classify_cosine(emb, class_ids, txt)
        correct += int((pred == task.train_y[lo:lo + 128]).sum())

    frozen_now = model.freeze_after_task(task.task_id)
    return {
        "task_id": task.task_id,
        "final_loss": final_loss,
        "train_accuracy": 100.0 * correct / n,
        "ddas_final_score": final_score,
        "newly_frozen": frozen_now,
    }


def _classify_group(model, samples, class_ids, route, text_cache, chunk=128):
    key = (route, tuple(class_ids))
    if key not in text_cache:
        if route == ZERO_SHOT_ROUTE:
            text_cache[key] = model.backbone.encode_text(class_ids).data
        else:
            text_cache[key] = model.encode_text(class_ids, route).data
    txt = text_cache[key]
    preds = []
    for lo in range(0, len(samples), chunk):
        if route == ZERO_SHOT_ROUTE:
            emb = model.backbone.encode_image(samples[lo:lo + chunk]).data
        else:
            emb = model.encode_image(samples[lo:lo + chunk], route).data
        _, p = model.backbone.classify_cosine(emb, class_ids, txt)
        preds.append(p)
    return np.concatenate(preds)


def evaluate_task(model, bank, task, mode="agnostic", oracle_route=None,
                  collect_rows=False):
    """Accuracy on one task's eval set; routing picked per image by the bank.

    mode "oracle" forces `oracle_route` (or zero-shot when None) instead of
    score-based selection. Returns (accuracy, ddas score rows or None).
    """
    n = len(task.eval_x)
    class_ids = sorted(task.class_ids)
    if mode == "agnostic" and bank is not None and bank.task_ids:
        scores = bank.score_all(task.eval_x)
        routes = bank.select_batch(scores)
    else:
        route = oracle_route if oracle_route is not None else ZERO_SHOT_ROUTE
        routes = np.full(n, route, dtype=np.int64)
        scores = None

    preds = np.empty(n, dtype=np.int64)
    text_cache = {}
    for route in np.unique(routes):
        sel = np.flatnonzero(routes == route)
        preds[sel] = _classify_group(model, task.eval_x[sel], class_ids,
                                     int(route), text_cache)
    acc = 100.0 * float((preds == task.eval_y).mean())

    rows = None
    if collect_rows and scores is not None:
        rows = [
            (task.task_id, i, int(task.eval_y[i]), int(routes[i]),
             int(preds[i]), scores[i].tolist())
            for i in range(n)
        ]
    return acc, rows


def _recalibrate(bank, ddas_cfg, calibration_store):
    if ddas_cfg.fixed_threshold > 0:
        bank.threshold = ddas_cfg.fixed_threshold
        return
    held = [
        bank.autoencoders[t].scores(calibration_store[t])
        for t in sorted(calibration_store)
    ]
    bank.calibrate_threshold(held, ddas_cfg.quantile)


@dataclass
class RunResult:
    matrix: EvalMatrix
    report: object
    task_reports: list
    activation_rows: list
    ddas_rows: list
    threshold: float | None
    model: object = field(repr=False, default=None)
    bank: object = field(repr=False, default=None)


def run_stream(stream, backbone, reference, cfg, moe_cfg=None, ddas_cfg=None):
    """Full continual run: per-task training then T x T task-agnostic eval."""
    moe_cfg = moe_cfg or MoeConfig()
    ddas_cfg = ddas_cfg or DdasConfig()
    tasks = stream.tasks
    if cfg.mode == "fewshot":
        tasks = [few_shot_subsample(t, cfg.shots, cfg.seed + t.task_id)
                 for t in tasks]
    for t in tasks:
        backbone.register_classes(t.class_ids, t.descriptors)

    model = ContinualModel(backbone, moe_cfg, seed=cfg.seed)
    bank = make_bank(backbone, ddas_cfg, reference, seed=cfg.seed)
    calibration = {}
    matrix = EvalMatrix(len(tasks), [f"task{t.task_id}" for t in tasks])
    task_reports = []
    ddas_rows = []
    for i, task in enumerate(tasks, start=1):
        model.add_task(task.task_id)
        task_reports.append(
            train_task(model, bank, task, cfg, ddas_cfg, calibration)
        )
        _recalibrate(bank, ddas_cfg, calibration)
        for j, other in enumerate(tasks, start=1):
            acc, rows = evaluate_task(model, bank, other, mode="agnostic",
                                      collect_rows=(i == len(tasks)))
            matrix.record(i, j, acc)
            if rows:
                ddas_rows.extend(rows)
    return RunResult(
        matrix=matrix,
        report=aggregate(matrix),
        task_reports=task_reports,
        activation_rows=model.activation_rows(),
        ddas_rows=ddas_rows,
        threshold=bank.threshold,
        model=model,
        bank=bank,
    )


def run_baseline_shared_adapter(stream, backbone, cfg):
    """Forgetting baseline: one always-on adapter fine-tuned across tasks."""
    tasks = stream.tasks
    if cfg.mode == "fewshot":
        tasks = [few_shot_subsample(t, cfg.shots, cfg.seed + t.task_id)
                 for t in tasks]
    for t in tasks:
        backbone.register_classes(t.class_ids, t.descriptors)
    model = ContinualModel(backbone, seed=cfg.seed, shared_adapter=True)
    matrix = EvalMatrix(len(tasks), [f"task{t.task_id}" for t in tasks])
    task_reports = []
    for i, task in enumerate(tasks, start=1):
        task_reports.append(train_task(model, None, task, cfg))
        for j, other in enumerate(tasks, start=1):
            # the shared adapter is always on; unseen tasks see it too
            acc, _ = evaluate_task(model, None, other, mode="oracle",
                                   oracle_route=task.task_id)
            matrix.record(i, j, acc)
    return RunResult(
        matrix=matrix,
        report=aggregate(matrix),
        task_reports=task_reports,
        activation_rows=[],
        ddas_rows=[],
        threshold=None,
        model=model,
    )


def run_cil(dataset, class_splits, backbone, cfg, moe_cfg=None,
            baseline=False):
    """Class-incremental run: one router, a small expert pool, no DDAS.

    `class_splits` is an ordered list of disjoint class-id subsets of
    `dataset` (a single Task). Evaluation after each step covers the union
    of classes seen so far. Returns (per-step accuracies, Avg, Last).
    """
    seen = set()
    for split in class_splits:
        if seen & set(split):
            raise DataError(f"class ids repeated across steps: {seen & set(split)}")
        seen |= set(split)
    if not seen <= set(dataset.class_ids):
        raise DataError("split references classes absent from the dataset")
    backbone.register_classes(
        dataset.class_ids,
        dataset.descriptors,
    )
    moe_cfg = moe_cfg or MoeConfig(n_experts=2, k=2)
    model = ContinualModel(backbone, moe_cfg, seed=cfg.seed,
                           shared_adapter=baseline)
    router_id = 0
    model.add_task(router_id)

    per_step = []
    seen_so_far = []
    for step, split in enumerate(class_splits):
        seen_so_far.extend(sorted(split))
        split = set(split)
        sel = np.isin(dataset.train_y, sorted(split))
        sub = _subset_task(dataset, sorted(split), sel, router_id)
        train_task(model, None, sub, cfg)
        # evaluate over everything seen so far, without task identity
        esel = np.isin(dataset.eval_y, seen_so_far)
        eval_task_obj = _subset_task(dataset, sorted(seen_so_far), None,
                                     router_id, eval_mask=esel)
        acc, _ = evaluate_task(model, None, eval_task_obj, mode="oracle",
                               oracle_route=router_id)
        per_step.append(acc)
    avg, last = cil_aggregate(per_step)
    return per_step, avg, last


def _subset_task(dataset, class_ids, train_mask, task_id, eval_mask=None):
    from .data import Task

    idx = {c: i for i, c in enumerate(dataset.class_ids)}
    desc = dataset.descriptors[[idx[c] for c in class_ids]]
    if train_mask is None:
        train_x = dataset.train_x[:0]
        train_y = dataset.train_y[:0]
    else:
        train_x, train_y = dataset.train_x[train_mask], dataset.train_y[train_mask]
    if eval_mask is None:
        eval_mask = np.isin(dataset.eval_y, class_ids)
    return Task(
        task_id=task_id,
        class_ids=list(class_ids),
        descriptors=desc,
        train_x=train_x,
        train_y=train_y,
        eval_x=dataset.eval_x[eval_mask],
        eval_y=dataset.eval_y[eval_mask],
    )
