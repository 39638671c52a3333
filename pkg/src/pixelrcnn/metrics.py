"""Confusion matrix and accuracy measures.

Rows are ground truth, columns are predictions.  Producer's accuracy is
per-class recall (diagonal over row total), user's accuracy per-class
precision (diagonal over column total).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list[str]

    @classmethod
    def empty(cls, K: int, class_names=None) -> "ConfusionMatrix":
        names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
        if len(names) != K:
            raise DataError(f"{len(names)} names for {K} classes")
        return cls(np.zeros((K, K), dtype=np.int64), names)

    @classmethod
    def from_counts(cls, counts, class_names=None) -> "ConfusionMatrix":
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0) or not np.all(counts == np.round(counts)):
            raise DataError("confusion counts must be nonnegative integers")
        cm = cls.empty(counts.shape[0], class_names)
        cm.counts[...] = counts
        return cm

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.K != self.K:
            raise DataError("cannot merge matrices of different size")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))


def confusion_accumulate(cm: ConfusionMatrix, y_true, y_pred) -> ConfusionMatrix:
    """Add (truth, prediction) pairs to ``cm`` in place and return it."""
    y_true = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
    y_pred = np.atleast_1d(np.asarray(y_pred, dtype=np.int64))
    if y_true.shape != y_pred.shape:
        raise DataError("truth and prediction lengths differ")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= cm.K):
            raise DataError(f"label outside [0, {cm.K})")
    np.add.at(cm.counts, (y_true, y_pred), 1)
    return cm


def confusion_from_labels(y_true, y_pred, K: int, class_names=None) -> ConfusionMatrix:
    return confusion_accumulate(ConfusionMatrix.empty(K, class_names), y_true, y_pred)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("overall accuracy of an empty matrix")
    return float(np.trace(cm.counts)) / cm.total


@dataclass(frozen=True)
class ClassAccuracy:
    name: str
    producers: float | None
    users: float | None


def class_metrics(cm: ConfusionMatrix) -> list[ClassAccuracy]:
    """Producer's and user's accuracy per class; ``None`` when the denominator is 0."""
    if cm.total == 0:
        raise UndefinedMetricError("class metrics of an empty matrix")
    diag = np.diag(cm.counts)
    out = []
    for k, name in enumerate(cm.class_names):
        r, c = cm.row_totals[k], cm.col_totals[k]
        out.append(
            ClassAccuracy(
                name,
                float(diag[k]) / r if r else None,
                float(diag[k]) / c if c else None,
            )
        )
    return out


def cohen_kappa(cm: ConfusionMatrix) -> float:
    n = cm.total
    if n == 0:
        raise UndefinedMetricError("kappa of an empty matrix")
    # exact integer arithmetic for the marginals, one float division at the end
    rows = cm.row_totals.astype(object)
    cols = cm.col_totals.astype(object)
    chance = int(sum(r * c for r, c in zip(rows, cols)))
    agree = int(np.trace(cm.counts))
    if chance == n * n:
        raise UndefinedMetricError("chance agreement is 1; kappa undefined")
    return (agree * n - chance) / (n * n - chance)


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{round(100 * x)}%"


def render_report(cm: ConfusionMatrix) -> str:
    """Fixed-width text table: truth rows with total and PA, UA footer, summary."""
    per = class_metrics(cm)
    names = cm.class_names
    w = max(6, max(len(n) for n in names) + 1)
    cw = max(6, len(str(int(cm.counts.max(initial=0)))) + 2, len(str(cm.total)) + 2)
    lines = []
    lines.append("Ground truth \\ Classified".ljust(w) + "".join(n[:cw - 1].rjust(cw) for n in names)
                 + "Total".rjust(cw) + "PA".rjust(cw))
    for k, name in enumerate(names):
        cells = "".join(str(int(v)).rjust(cw) for v in cm.counts[k])
        lines.append(name.ljust(w) + cells + str(int(cm.row_totals[k])).rjust(cw)
                     + _pct(per[k].producers).rjust(cw))
    lines.append("Total".ljust(w) + "".join(str(int(v)).rjust(cw) for v in cm.col_totals)
                 + str(cm.total).rjust(cw))
    lines.append("UA".ljust(w) + "".join(_pct(m.users).rjust(cw) for m in per))
    lines.append("")
    lines.append(f"OA = {overall_accuracy(cm):.5f}")
    try:
        lines.append(f"kappa = {cohen_kappa(cm):.5f}")
    except UndefinedMetricError:
        lines.append("kappa = undefined")
    return "\n".join(lines) + "\n"


def render_csv(cm: ConfusionMatrix) -> str:
    """CSV mirror: header of class names, K count rows, then PA/UA/OA/kappa rows."""
    per = class_metrics(cm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", *cm.class_names])
    for k, name in enumerate(cm.class_names):
        w.writerow([name, *(int(v) for v in cm.counts[k])])
    fmt = lambda x: "undefined" if x is None else repr(float(x))  # noqa: E731
    w.writerow(["PA", *(fmt(m.producers) for m in per)])
    w.writerow(["UA", *(fmt(m.users) for m in per)])
    w.writerow(["OA", repr(overall_accuracy(cm))])
    try:
        w.writerow(["kappa", repr(cohen_kappa(cm))])
    except UndefinedMetricError:
        w.writerow(["kappa", "undefined"])
    return buf.getvalue()


def parse_matrix_csv(text: str) -> ConfusionMatrix:
    """Read the count block of a report CSV (or a bare matrix CSV).

    Expects a header ``class,<name>,...`` followed by one row per class;
    anything after the K count rows is ignored.
    """
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise FormatError("empty confusion-matrix CSV")
    names = rows[0][1:]
    K = len(names)
    if K == 0 or len(rows) < K + 1:
        raise FormatError("confusion-matrix CSV needs a header and K count rows")
    counts = np.zeros((K, K), dtype=np.int64)
    for k in range(K):
        row = rows[k + 1]
        if len(row) < K + 1:
            raise FormatError(f"row {k + 1} has {len(row) - 1} counts, expected {K}")
        try:
            counts[k] = [int(v) for v in row[1:K + 1]]
        except ValueError as exc:
            raise FormatError(f"non-integer count in row {k + 1}") from exc
    return ConfusionMatrix.from_counts(counts, names)


def load_matrix_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        return parse_matrix_csv(fh.read())
