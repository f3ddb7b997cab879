"""Desk-scale continual learning with mixture-of-experts adapters.

A frozen two-tower backbone gains per-task low-rank expert adapters routed
by per-task gates; frozen experts accumulate across the task stream, and a
bank of per-task autoencoders picks the route (or falls back to zero-shot)
at evaluation time without task identity.
"""

from .backbone import Backbone, Geometry, pretrain_backbone, zero_shot_accuracy
from .data import (
    ReferenceSet,
    SyntheticTaskSpec,
    Task,
    TaskStream,
    default_stream_specs,
    generate_ood_probe,
    generate_reference,
    generate_stream,
)
from .ddas import DdasBank, TaskAutoencoder, sweep_threshold
from .errors import (
    DataError,
    EmptySupportError,
    GraphError,
    MoeclError,
    NonFiniteError,
    ShapeError,
    TaskError,
)
from .metrics import EvalMatrix, MetricReport, aggregate, cil_aggregate
from .moe import Expert, MoeLayer, Router, SharedAdapterLayer
from .optim import AdamW
from .tensor import Tensor, grad_check
from .trainer import (
    ContinualModel,
    DdasConfig,
    MoeConfig,
    TrainConfig,
    run_baseline_shared_adapter,
    run_cil,
    run_stream,
    train_task,
)

__version__ = "0.1.0"
