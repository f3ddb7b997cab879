"""Accuracy-matrix bookkeeping and the Transfer/Average/Last aggregates.

The matrix A is T x T with A[i][j] the accuracy (%) on task j's eval set
after training tasks 1..i. Per task j: Last_j is the final row, Average_j
the column mean, Transfer_j the mean of the rows strictly above the
diagonal (undefined for j = 1). Aggregates are plain means over the
defined per-task values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class EvalMatrix:
    num_tasks: int
    task_names: list = None
    _a: np.ndarray = field(default=None, repr=False)
    _filled: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        t = self.num_tasks
        if t < 1:
            raise DataError("matrix needs at least one task")
        if self.task_names is None:
            self.task_names = [f"task{j + 1}" for j in range(t)]
        self._a = np.zeros((t, t))
        self._filled = np.zeros((t, t), dtype=bool)

    def record(self, i, j, accuracy):
        """Write A[i][j] (1-based); overwrites are an error."""
        t = self.num_tasks
        if not (1 <= i <= t and 1 <= j <= t):
            raise DataError(f"index ({i},{j}) outside 1..{t}")
        if not 0.0 <= accuracy <= 100.0:
            raise DataError(f"accuracy {accuracy} outside [0, 100]")
        if self._filled[i - 1, j - 1]:
            raise DataError(f"cell ({i},{j}) already recorded")
        self._a[i - 1, j - 1] = accuracy
        self._filled[i - 1, j - 1] = True

    def get(self, i, j):
        if not self._filled[i - 1, j - 1]:
            raise DataError(f"cell ({i},{j}) not recorded")
        return float(self._a[i - 1, j - 1])

    @property
    def complete(self):
        return bool(self._filled.all())

    @property
    def values(self):
        return self._a.copy()

    @classmethod
    def from_array(cls, array, task_names=None):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise DataError("matrix must be square")
        m = cls(array.shape[0], task_names)
        for i in range(array.shape[0]):
            for j in range(array.shape[1]):
                m.record(i + 1, j + 1, float(array[i, j]))
        return m

    def to_csv(self, path):
        """One-decimal CSV, header = task names, one row per after-task state."""
        with open(path, "w") as fh:
            fh.write("after_task," + ",".join(self.task_names) + "\n")
            for i in range(self.num_tasks):
                row = ",".join(f"{v:.1f}" for v in self._a[i])
                fh.write(f"{self.task_names[i]},{row}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        header = lines[0].split(",")[1:]
        rows = [[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]]
        return cls.from_array(np.array(rows), task_names=header)


@dataclass
class MetricReport:
    transfer_per_task: dict
    average_per_task: dict
    last_per_task: dict
    transfer: float | None
    average: float
    last: float

    def to_dict(self):
        return {
            "transfer": self.transfer,
            "average": self.average,
            "last": self.last,
            "per_task": {
                "transfer": self.transfer_per_task,
                "average": self.average_per_task,
                "last": self.last_per_task,
            },
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def aggregate(matrix):
    """Transfer/Average/Last report from a complete matrix."""
    if not matrix.complete:
        raise DataError("matrix incomplete; aggregate undefined")
    a = matrix.values
    t = matrix.num_tasks
    names = matrix.task_names
    last = {names[j]: float(a[t - 1, j]) for j in range(t)}
    average = {names[j]: float(a[:, j].mean()) for j in range(t)}
    transfer = {names[j]: float(a[:j, j].mean()) for j in range(1, t)}
    return MetricReport(
        transfer_per_task=transfer,
        average_per_task=average,
        last_per_task=last,
        transfer=float(np.mean(list(transfer.values()))) if transfer else None,
        average=float(np.mean(list(average.values()))),
        last=float(np.mean(list(last.values()))),
    )


def cil_aggregate(per_step_accuracies):
    """(Avg, Last) over per-step all-seen-classes accuracies."""
    accs = [float(a) for a in per_step_accuracies]
    if not accs:
        raise DataError("empty accuracy sequence")
    return float(np.mean(accs)), accs[-1]
