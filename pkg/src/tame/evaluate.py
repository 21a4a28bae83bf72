"""Localization and classification metrics, plus plot-ready CSV exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from tame.errors import ContractError
from tame.frontend import MelSpectrogram, SceneLabel


class Predictor(Protocol):
    n_classes: int

    def predict(self, samples: Sequence[tuple[MelSpectrogram, SceneLabel]]) -> tuple[np.ndarray, np.ndarray]:
        """Positions in meters ``(n, 3)`` and class logits ``(n, C)``."""


@dataclass
class EvalReport:
    d_x: float
    d_y: float
    d_z: float
    ape: float
    acc: float
    confusion: np.ndarray  # (C, C), rows = truth, columns = prediction
    n: int

    def table_line(self) -> str:
        return (f"Dx={self.d_x:.3f} Dy={self.d_y:.3f} Dz={self.d_z:.3f} "
                f"APE={self.ape:.3f} Acc={100.0 * self.acc:.1f}%")


def report_from_arrays(pred_pos, truth_pos, logits, labels, n_classes: int) -> EvalReport:
    pred_pos = np.asarray(pred_pos, dtype=np.float64)
    truth_pos = np.asarray(truth_pos, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ContractError("cannot evaluate an empty test set")
    logits = np.asarray(logits)
    if logits.shape[1] != n_classes or labels.max() >= n_classes or labels.min() < 0:
        raise ContractError(f"labels/logits disagree with the model's {n_classes} classes")
    err = np.abs(pred_pos - truth_pos)
    d = err.mean(axis=0)
    guess = logits.argmax(axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, guess), 1)
    ape = err.sum(axis=1).mean()
    return EvalReport(
        float(d[0]), float(d[1]), float(d[2]), float(ape),
        float(np.mean(guess == labels)), confusion, n,
    )


def evaluate(model: Predictor, test_set: Sequence[tuple[MelSpectrogram, SceneLabel]]) -> EvalReport:
    if len(test_set) == 0:
        raise ContractError("cannot evaluate an empty test set")
    labels = np.asarray([lab.class_index for _, lab in test_set])
    if labels.max() >= model.n_classes:
        raise ContractError(f"test labels reach class {labels.max()} but the model has {model.n_classes}")
    pos, logits = model.predict(test_set)
    truth = np.stack([lab.array for _, lab in test_set])
    return report_from_arrays(pos, truth, logits, labels, model.n_classes)


def constant_baseline_ape(extent) -> float:
    """APE of always predicting the volume center when positions are uniform.

    For a uniform coordinate on an interval of length ``a`` the mean absolute
    deviation from the midpoint is ``a / 4``.
    """
    return float(np.sum(np.asarray(extent, dtype=np.float64)) / 4.0)


TRAJECTORY_HEADER = ["index", "truth_x", "truth_y", "truth_z", "pred_x", "pred_y", "pred_z"]


def emit_trajectory_csv(model: Predictor, ordered_test_set, path) -> None:
    """One row per segment, in the given (temporal) order."""
    if len(ordered_test_set):
        pos, _ = model.predict(ordered_test_set)
    else:
        pos = np.zeros((0, 3))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for i, ((_, lab), p) in enumerate(zip(ordered_test_set, pos)):
            w.writerow([i, *map(repr, map(float, lab.position)), *map(repr, map(float, p))])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    truth = np.array([[float(r[f"truth_{a}"]) for a in "xyz"] for r in rows]).reshape(-1, 3)
    pred = np.array([[float(r[f"pred_{a}"]) for a in "xyz"] for r in rows]).reshape(-1, 3)
    return truth, pred


def emit_confusion_csv(report: EvalReport, class_names: Sequence[str], path, normalized: bool = False) -> None:
    """Confusion counts (or row percentages) with class names on both axes."""
    C = report.confusion.shape[0]
    if len(class_names) != C:
        raise ContractError(f"{len(class_names)} class names for a {C}-class confusion matrix")
    mat = report.confusion.astype(np.float64)
    if normalized:
        totals = mat.sum(axis=1, keepdims=True)
        mat = np.divide(100.0 * mat, totals, out=np.zeros_like(mat), where=totals > 0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred", *class_names])
        for name, row in zip(class_names, mat):
            w.writerow([name, *(f"{v:.4f}" if normalized else str(int(v)) for v in row)])
