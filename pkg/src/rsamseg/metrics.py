"""Binary segmentation metrics from confusion counts.

Every ratio is evaluated as an exact fraction and rounded once, so results do
not depend on summation order. A ratio whose denominator is zero is 1.0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Iterable, List, Sequence, TextIO, Tuple

import numpy as np
import torch

from .errors import ParameterError, ShapeError

METRIC_NAMES = (
    "jaccard",
    "precision",
    "recall",
    "specificity",
    "f1",
    "overall_accuracy",
    "miou",
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricsReport:
    jaccard: float
    precision: float
    recall: float
    specificity: float
    f1: float
    overall_accuracy: float
    miou: float

    def as_row(self) -> List[float]:
        return [getattr(self, name) for name in METRIC_NAMES]


def _as_numpy(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask)


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ParameterError(f"{name} mask is not binary")
    p, g = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(1) if den == 0 else Fraction(num, den)


def _exact_metrics(c: ConfusionCounts) -> Tuple[Fraction, ...]:
    if c.total <= 0:
        raise ParameterError("confusion counts cover no pixels")
    fg_iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    bg_iou = _ratio(c.tn, c.tn + c.fn + c.fp)
    return (
        fg_iou,
        _ratio(c.tp, c.tp + c.fp),
        _ratio(c.tp, c.tp + c.fn),
        _ratio(c.tn, c.tn + c.fp),
        _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        Fraction(c.tp + c.tn, c.total),
        (fg_iou + bg_iou) / 2,
    )


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    return MetricsReport(*(float(v) for v in _exact_metrics(c)))


def aggregate(counts: Sequence[ConfusionCounts], mode: str = "micro") -> MetricsReport:
    """``micro``: metrics of the pooled counts. ``macro``: mean of per-image metrics."""
    if not counts:
        raise ParameterError("cannot aggregate an empty list of counts")
    if mode == "micro":
        pooled = counts[0]
        for c in counts[1:]:
            pooled = pooled + c
        return compute_metrics(pooled)
    if mode == "macro":
        per_image = [_exact_metrics(c) for c in counts]
        n = len(per_image)
        return MetricsReport(*(float(sum(col) / n) for col in zip(*per_image)))
    raise ParameterError(f"unknown aggregation mode {mode!r}")


def write_report_csv(
    out: TextIO, rows: Iterable[Tuple[str, ConfusionCounts]], counts_columns: bool = True
) -> Tuple[MetricsReport, MetricsReport]:
    """One row per image, then ``__micro__`` and ``__macro__`` summary rows.

    Returns the (micro, macro) reports.
    """
    rows = list(rows)
    writer = csv.writer(out, lineterminator="\n")
    header = ["id", *METRIC_NAMES]
    if counts_columns:
        header += [f.name for f in fields(ConfusionCounts)]
    writer.writerow(header)

    def emit(ident: str, report: MetricsReport, c: ConfusionCounts = None) -> None:
        line = [ident, *(repr(v) for v in report.as_row())]
        if counts_columns:
            line += [c.tp, c.fp, c.fn, c.tn] if c is not None else ["", "", "", ""]
        writer.writerow(line)

    for ident, c in rows:
        emit(ident, compute_metrics(c), c)
    counts = [c for _, c in rows]
    micro, macro = aggregate(counts, "micro"), aggregate(counts, "macro")
    pooled = counts[0]
    for c in counts[1:]:
        pooled = pooled + c
    emit("__micro__", micro, pooled)
    emit("__macro__", macro)
    return micro, macro
