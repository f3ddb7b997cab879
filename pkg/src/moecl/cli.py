"""Operator surface: pretrain, run, sweep, report.

Every command takes ``--config`` (JSON, full-snapshot semantics) plus flag
overrides; the merged effective config is written into the run directory.
Reruns with identical config and seed reproduce identical CSV/JSON bytes.
The environment variable ``MOECL_OUT_ROOT`` sets the default output root.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import config as config_mod
from . import io as io_mod
from .backbone import Backbone, pretrain_backbone
from .data import (
    SyntheticTaskSpec,
    default_stream_specs,
    generate_reference,
    generate_stream,
)
from .ddas import REFERENCE_ID, sweep_threshold
from .errors import DataError, MoeclError
from .metrics import EvalMatrix, aggregate
from .trainer import (
    ZERO_SHOT_ROUTE,
    make_bank,
    run_baseline_shared_adapter,
    run_cil,
    run_stream,
)

ENV_OUT_ROOT = "MOECL_OUT_ROOT"


def _resolve_out(out):
    root = os.environ.get(ENV_OUT_ROOT, ".")
    path = Path(out)
    return path if path.is_absolute() else Path(root) / path


def _load_config(config_path, **overrides):
    cfg = config_mod.load(config_path) if config_path else config_mod.RunConfig()
    return config_mod.apply_overrides(cfg, overrides)


def _fmt(x):
    return f"{float(x):.10g}"


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            _fmt(v) if isinstance(v, float) else str(v) for v in row
        ))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _build_reference(cfg):
    return generate_reference(
        cfg.seed,
        cfg.pretrain.reference_size,
        dim=cfg.stream.dim,
        patches=cfg.stream.patches,
        num_classes=cfg.pretrain.reference_classes,
    )


def _build_stream(cfg):
    specs = default_stream_specs(
        num_tasks=cfg.stream.num_tasks,
        num_classes=cfg.stream.classes_per_task,
        train_per_class=cfg.stream.train_per_class,
        eval_per_class=cfg.stream.eval_per_class,
    )
    return generate_stream(specs, cfg.seed + 1, dim=cfg.stream.dim,
                           patches=cfg.stream.patches,
                           separation=cfg.stream.separation)


def _load_or_build_backbone(cfg, reference):
    if cfg.backbone_checkpoint:
        return Backbone.load(cfg.backbone_checkpoint)
    return pretrain_backbone(reference, cfg.pretrain.steps, seed=cfg.seed,
                             geometry=cfg.geometry)


def _maybe_load_reference_ae(cfg, bank):
    """Reuse the pretrained reference autoencoder saved next to the backbone."""
    if not cfg.backbone_checkpoint:
        return False
    path = Path(cfg.backbone_checkpoint).parent / "reference_ae.mclb"
    if not path.exists():
        return False
    arrays = io_mod.load_arrays(str(path))
    ae = bank.make_autoencoder(REFERENCE_ID)
    for part in ("w1", "b1", "w2", "b2"):
        getattr(ae, part).data[...] = arrays[f"ddas.ae0.{part}"]
    return True


def _make_bank_for_run(cfg, backbone, reference):
    bank = make_bank(backbone, cfg.ddas, reference=None, seed=cfg.seed)
    if not _maybe_load_reference_ae(cfg, bank):
        bank.train_autoencoder(REFERENCE_ID, reference.samples,
                               cfg.ddas.reference_iterations)
    return bank


def _plot_heatmap(path, values, title, xlabel, ylabel,
                  xticks=None, yticks=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(np.asarray(values), aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if xticks is not None:
        ax.set_xticks(range(len(xticks)), xticks, rotation=45, ha="right")
    if yticks is not None:
        ax.set_yticks(range(len(yticks)), yticks)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_curves(path, series, title, xlabel, ylabel):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_run_artifacts(outdir, cfg, result):
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    result.matrix.to_csv(str(outdir / "matrix.csv"))
    result.report.to_json(str(outdir / "metrics.json"))
    _write_csv(outdir / "activations.csv",
               ["layer", "task", "expert", "count", "frequency"],
               result.activation_rows)
    ddas_rows = [
        (t, i, y, r, p, *[float(s) for s in scores])
        for t, i, y, r, p, scores in result.ddas_rows
    ]
    n_scores = len(result.ddas_rows[0][5]) if result.ddas_rows else 0
    _write_csv(outdir / "ddas_scores.csv",
               ["eval_task", "sample", "true", "route", "pred"]
               + [f"score_task{t + 1}" for t in range(n_scores)],
               ddas_rows)
    if result.model is not None:
        arrays = result.model.state_arrays()
        if result.bank is not None:
            arrays.update(result.bank.state_arrays())
        if arrays:
            io_mod.save_arrays(str(outdir / "adapters.mclb"), arrays)
    _plot_heatmap(outdir / "matrix_heatmap.svg", result.matrix.values,
                  "Accuracy after each task", "evaluated task",
                  "state after task",
                  xticks=result.matrix.task_names,
                  yticks=result.matrix.task_names)


def _error_exit(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


@click.group()
def main():
    """Continual-learning laboratory: MoE adapters with autoencoder routing."""


def _common_options(fn):
    fn = click.option("--config", "config_path", type=str, default=None,
                      help="JSON config file (full-snapshot semantics).")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--out", type=str, default=None,
                      help="Output directory (under MOECL_OUT_ROOT).")(fn)
    return fn


@main.command()
@_common_options
def pretrain(config_path, seed, out):
    """Build and freeze the backbone and reference autoencoder."""
    try:
        cfg = _load_config(config_path, seed=seed, out=out)
        outdir = _resolve_out(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        reference = _build_reference(cfg)
        backbone = pretrain_backbone(reference, cfg.pretrain.steps,
                                     seed=cfg.seed, geometry=cfg.geometry)
        ckpt = outdir / "backbone.mclb"
        backbone.save(str(ckpt))
        bank = make_bank(backbone, cfg.ddas, reference, seed=cfg.seed)
        io_mod.save_arrays(
            str(outdir / "reference_ae.mclb"),
            bank.autoencoders[REFERENCE_ID].state_arrays("ddas.ae0"),
        )
        cfg.backbone_checkpoint = str(ckpt)
        (outdir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        click.echo(f"checkpoint {ckpt}")
        click.echo(f"parameter_hash {backbone.parameter_hash()}")
    except MoeclError as exc:
        _error_exit(exc)


@main.command()
@_common_options
@click.option("--mode", type=click.Choice(["mtil", "fewshot", "cil"]),
              default=None, help="Override the training mode.")
def run(config_path, seed, out, mode):
    """Execute a continual run and write matrix/metrics/score artifacts."""
    try:
        cfg = _load_config(config_path, seed=seed, out=out, **{
            "train.mode": mode})
        outdir = _resolve_out(cfg.out)
        reference = _build_reference(cfg)
        backbone = _load_or_build_backbone(cfg, reference)
        if cfg.train.mode == "cil":
            _run_cil_command(cfg, backbone, outdir)
        else:
            bank_seed_backbone = backbone
            stream = _build_stream(cfg)
            result = run_stream(stream, bank_seed_backbone, reference,
                                cfg.train, cfg.moe, cfg.ddas)
            write_run_artifacts(outdir, cfg, result)
            rep = result.report
            transfer = "n/a" if rep.transfer is None else f"{rep.transfer:.1f}"
            click.echo(
                f"Transfer {transfer}  Average {rep.average:.1f}  "
                f"Last {rep.last:.1f}"
            )
            click.echo(f"artifacts {outdir}")
    except MoeclError as exc:
        _error_exit(exc)


def _cil_dataset_and_splits(cfg):
    steps = cfg.train.cil_steps
    spec = SyntheticTaskSpec(
        task_id=1,
        num_classes=2 * steps,
        train_per_class=cfg.stream.train_per_class,
        eval_per_class=cfg.stream.eval_per_class,
    )
    stream = generate_stream([spec], cfg.seed + 1, dim=cfg.stream.dim,
                             patches=cfg.stream.patches,
                             separation=cfg.stream.separation)
    dataset = stream.tasks[0]
    ids = sorted(dataset.class_ids)
    splits = [ids[2 * s:2 * s + 2] for s in range(steps)]
    return dataset, splits


def _run_cil_command(cfg, backbone, outdir):
    dataset, splits = _cil_dataset_and_splits(cfg)
    per_step, avg, last = run_cil(dataset, splits, backbone, cfg.train,
                                  cfg.moe)
    b_steps, b_avg, b_last = run_cil(dataset, splits, backbone, cfg.train,
                                     cfg.moe, baseline=True)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    payload = {
        "mode": "cil",
        "per_step": per_step,
        "avg": avg,
        "last": last,
        "baseline_per_step": b_steps,
        "baseline_avg": b_avg,
        "baseline_last": b_last,
    }
    (outdir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"Avg {avg:.1f}  Last {last:.1f}  "
               f"(baseline Avg {b_avg:.1f}  Last {b_last:.1f})")
    click.echo(f"artifacts {outdir}")


def _parse_grid(grid, numeric=float):
    try:
        values = [numeric(v) for v in grid.split(",") if v.strip()]
    except ValueError:
        raise DataError(f"bad grid {grid!r}")
    if not values:
        raise DataError("empty sweep grid")
    return values


@main.command()
@_common_options
@click.option("--axis", type=click.Choice(["threshold", "experts", "k"]),
              required=True)
@click.option("--grid", type=str, required=True,
              help="Comma-separated grid values for the chosen axis.")
def sweep(config_path, seed, out, axis, grid):
    """Repeated runs varying one axis; emits a curve CSV."""
    try:
        cfg = _load_config(config_path, seed=seed, out=out)
        outdir = _resolve_out(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        if axis == "threshold":
            rows = _sweep_threshold(cfg, _parse_grid(grid, float))
            header = ["threshold", "zero_shot_rate", "routing_accuracy",
                      "transfer", "average", "last"]
        else:
            rows = _sweep_capacity(cfg, axis, _parse_grid(grid, int))
            header = [axis, "transfer", "average", "last"]
        path = outdir / f"sweep_{axis}.csv"
        _write_csv(path, header, rows)
        _plot_curves(
            outdir / f"sweep_{axis}.svg",
            {"Last": ([r[0] for r in rows], [r[-1] for r in rows])},
            f"{axis} sweep", axis, "accuracy",
        )
        click.echo(f"sweep table {path}")
    except MoeclError as exc:
        _error_exit(exc)


def _sweep_threshold(cfg, grid):
    """One trained run; routing re-scored under each threshold."""
    reference = _build_reference(cfg)
    backbone = _load_or_build_backbone(cfg, reference)
    stream = _build_stream(cfg)
    result = run_stream(stream, backbone, reference, cfg.train, cfg.moe,
                        cfg.ddas)
    bank, model = result.bank, result.model
    tasks = stream.tasks
    scores = [bank.score_all(t.eval_x) for t in tasks]
    true_ids = [t.task_id for t in tasks]

    def eval_fn():
        total = routed = correct_route = zero = 0
        last_correct = []
        for t, s in zip(tasks, scores):
            routes = bank.select_batch(s)
            total += len(routes)
            zero += int((routes == ZERO_SHOT_ROUTE).sum())
            correct_route += int((routes == t.task_id).sum())
            from .trainer import _classify_group  # local to avoid cycle

            preds = np.empty(len(routes), dtype=np.int64)
            cache = {}
            for r in np.unique(routes):
                sel = np.flatnonzero(routes == r)
                preds[sel] = _classify_group(model, t.eval_x[sel],
                                             sorted(t.class_ids), int(r),
                                             cache)
            last_correct.append(100.0 * float((preds == t.eval_y).mean()))
        matrix = result.matrix.values
        matrix[-1, :] = last_correct  # final row re-scored at this threshold
        m = EvalMatrix.from_array(matrix, result.matrix.task_names)
        rep = aggregate(m)
        return {
            "zero_shot_rate": zero / total,
            "routing_accuracy": correct_route / total,
            "transfer": rep.transfer,
            "average": rep.average,
            "last": rep.last,
        }

    table = sweep_threshold(bank, grid, eval_fn)
    return [
        (r["threshold"], r["zero_shot_rate"], r["routing_accuracy"],
         r["transfer"], r["average"], r["last"])
        for r in table
    ]


def _sweep_capacity(cfg, axis, grid):
    """Full run per grid value of n_experts or k."""
    rows = []
    for value in grid:
        point = config_mod.from_dict(json.loads(cfg.to_json()))
        if axis == "experts":
            point.moe.n_experts = value
            point.moe.k = min(point.moe.k, value)
        else:
            point.moe.k = value
        reference = _build_reference(point)
        backbone = _load_or_build_backbone(point, reference)
        stream = _build_stream(point)
        result = run_stream(stream, backbone, reference, point.train,
                            point.moe, point.ddas)
        rep = result.report
        rows.append((value, rep.transfer, rep.average, rep.last))
    return rows


@main.command()
@click.argument("run_dir", type=str)
def report(run_dir):
    """Render matrix/metrics from a run directory as a table and SVG plots."""
    try:
        rundir = _resolve_out(run_dir)
        matrix_path = rundir / "matrix.csv"
        if not matrix_path.exists():
            raise DataError(f"no matrix.csv in {rundir}")
        matrix = EvalMatrix.from_csv(str(matrix_path))
        metrics_path = rundir / "metrics.json"
        if metrics_path.exists():
            rep = json.loads(metrics_path.read_text(encoding="utf-8"))
        else:
            rep = aggregate(matrix).to_dict()

        names = matrix.task_names
        width = max(10, max(len(n) for n in names) + 2)
        click.echo("after".ljust(width)
                   + "".join(n.rjust(width) for n in names))
        vals = matrix.values
        for i, name in enumerate(names):
            click.echo(name.ljust(width)
                       + "".join(f"{v:.1f}".rjust(width) for v in vals[i]))
        for key in ("transfer", "average", "last"):
            if rep.get(key) is not None:
                click.echo(f"{key.capitalize()} {rep[key]:.1f}")

        _plot_heatmap(rundir / "matrix_heatmap.svg", vals,
                      "Accuracy after each task", "evaluated task",
                      "state after task", xticks=names, yticks=names)
        cols = list(range(1, len(names) + 1))
        _plot_curves(
            rundir / "metric_curves.svg",
            {names[j]: (cols[:len(names)], vals[:, j].tolist())
             for j in range(len(names))},
            "Per-task accuracy as training progresses",
            "after task", "accuracy",
        )
        act_path = rundir / "activations.csv"
        if act_path.exists():
            _plot_activation_heatmap(act_path, rundir / "activations.svg")
        click.echo(f"plots {rundir}")
    except MoeclError as exc:
        _error_exit(exc)


def _plot_activation_heatmap(csv_path, svg_path):
    rows = [line.split(",") for line in
            csv_path.read_text(encoding="utf-8").strip().splitlines()[1:]]
    if not rows:
        return
    layers = sorted({r[0] for r in rows})
    layer = layers[0]  # first image block: the routing picture is per layer
    sub = [r for r in rows if r[0] == layer]
    tasks = sorted({int(r[1]) for r in sub})
    experts = sorted({int(r[2]) for r in sub})
    grid = np.zeros((len(tasks), len(experts)))
    for r in sub:
        grid[tasks.index(int(r[1])), experts.index(int(r[2]))] = float(r[4])
    _plot_heatmap(svg_path, grid, f"Expert selection frequency ({layer})",
                  "expert", "task",
                  xticks=[str(e) for e in experts],
                  yticks=[f"task{t}" for t in tasks])


if __name__ == "__main__":
    main()
