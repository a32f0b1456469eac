"""Accuracy bookkeeping, average accuracy, forgetting and confusion matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import ClassifierModel
from .tensor import Tensor


class IncompleteRowError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """Lower-triangular record: ``rows[n-1][j-1]`` is the accuracy on task j's
    test set after learning task n."""

    n_tasks: int
    rows: list[list[float]] = field(default_factory=list)

    def set_row(self, n: int, accuracies) -> None:
        accuracies = [float(a) for a in accuracies]
        if n != len(self.rows) + 1 or n > self.n_tasks:
            raise ValueError(f"row {n} out of sequence (have {len(self.rows)} of {self.n_tasks})")
        if len(accuracies) != n:
            raise ValueError(f"row {n} needs exactly {n} entries, got {len(accuracies)}")
        if any(not 0.0 <= a <= 1.0 for a in accuracies):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(accuracies)

    def __getitem__(self, nj: tuple[int, int]) -> float:
        n, j = nj
        return self.rows[n - 1][j - 1]

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.n_tasks

    def row(self, n: int) -> list[float]:
        if not 1 <= n <= self.n_tasks:
            raise ValueError(f"task index {n} outside [1, {self.n_tasks}]")
        if n > len(self.rows):
            raise IncompleteRowError(f"row {n} has not been recorded")
        return self.rows[n - 1]

    def to_dict(self) -> dict:
        return {"n_tasks": self.n_tasks, "rows": self.rows}

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for n, r in enumerate(rows, start=1):
            m.set_row(n, r)
        return m

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        m = cls(d["n_tasks"])
        for n, r in enumerate(d["rows"], start=1):
            m.set_row(n, r)
        return m


def average_accuracy(m: AccuracyMatrix, n: int) -> float:
    row = m.row(n)
    return sum(row) / n


def forgetting(m: AccuracyMatrix, n: int) -> float:
    """Mean over tasks j < n of (best earlier accuracy on j) - (accuracy on j now).

    The best is taken over rows j..n-1, the rows where task j has an entry.
    """
    if n < 2:
        raise ValueError("forgetting is undefined for n < 2")
    current = m.row(n)
    drops = []
    for j in range(1, n):
        best = max(m[i, j] for i in range(j, n))
        drops.append(best - current[j - 1])
    return sum(drops) / (n - 1)


def series(m: AccuracyMatrix) -> tuple[list[float], list[float | None]]:
    """A_n for every recorded n and F_n (None at n = 1)."""
    n_rows = len(m.rows)
    acc = [average_accuracy(m, n) for n in range(1, n_rows + 1)]
    fgt = [None] + [forgetting(m, n) for n in range(2, n_rows + 1)]
    return acc, fgt


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion_from_predictions(labels, predictions, num_classes: int) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1)
    return ConfusionMatrix(counts)


def predict(model, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample in eval mode (ties go to the lowest index)."""
    out = []
    with T.no_grad():
        for s in range(0, samples.shape[0], batch_size):
            logits = model(Tensor._wrap(np.asarray(samples[s : s + batch_size], dtype=np.float64)), False)
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ClassifierModel, test_set) -> tuple[float, ConfusionMatrix]:
    """Accuracy and confusion matrix of ``model`` on a labeled dataset."""
    if len(test_set) == 0:
        raise ValueError("evaluate: empty test set")
    num_classes = model.config.num_classes if hasattr(model, "config") else test_set.num_classes
    preds = predict(model, test_set.samples)
    cm = confusion_from_predictions(test_set.labels, preds, num_classes)
    return cm.accuracy, cm


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    fields = ["run_id", "method", "seed", "n", "A_n", "F_n"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


def metrics_rows(run_id: str, method: str, seed: int, m: AccuracyMatrix) -> list[dict]:
    acc, fgt = series(m)
    return [
        {"run_id": run_id, "method": method, "seed": seed, "n": n, "A_n": a, "F_n": f}
        for n, (a, f) in enumerate(zip(acc, fgt), start=1)
    ]


def metrics_report(m: AccuracyMatrix, confusions: list | None = None) -> dict:
    acc, fgt = series(m)
    out = {"accuracy_matrix": m.to_dict(), "A": acc, "F": fgt}
    if confusions is not None:
        out["confusion_matrices"] = [c.to_list() if isinstance(c, ConfusionMatrix) else c for c in confusions]
    return out


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
