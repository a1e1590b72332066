"""Accuracy, macro one-vs-rest AUC and quadratic weighted kappa, plus
per-fold aggregation into mean and population std."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("accuracy", "auc_macro_ovr", "qwk")


class DegenerateMarginalsError(ValueError):
    pass


def accuracy(targets, preds) -> float:
    t = np.asarray(targets)
    p = np.asarray(preds)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(t == p))


def confusion_matrix(targets, preds, num_classes: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"targets and preds must be equal-length vectors, got {t.shape}, {p.shape}")
    if t.size == 0:
        raise ValueError("need at least one sample")
    for name, v in (("targets", t), ("preds", p)):
        if v.min() < 0 or v.max() >= num_classes:
            raise ValueError(f"{name} outside [0, {num_classes})")
    o = np.zeros((num_classes, num_classes), dtype=np.float64)
    np.add.at(o, (t, p), 1.0)
    return o


def qwk(targets, preds, num_classes: int) -> float:
    """Quadratic weighted kappa.

    When the expected-disagreement term vanishes (both marginals sit on one
    and the same class) the score is 1.0 if every sample lies on that cell,
    otherwise :class:`DegenerateMarginalsError` is raised.
    """
    if num_classes < 2:
        raise ValueError("qwk needs at least two classes")
    o = confusion_matrix(targets, preds, num_classes)
    n = o.sum()
    idx = np.arange(num_classes)
    w = (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / n
    den = (w * e).sum()
    if den == 0:
        if np.count_nonzero(o) == 1 and np.trace(o) == n:
            return 1.0
        raise DegenerateMarginalsError("degenerate marginals")
    return float(1.0 - (w * o).sum() / den)


def auc_macro_ovr(targets, probs) -> float:
    """Macro mean of per-class Mann-Whitney AUCs (ties count one half).

    Classes without at least one positive and one negative are skipped.
    """
    t = np.asarray(targets, dtype=np.int64)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != t.shape[0]:
        raise ValueError(f"probability matrix {p.shape} does not match {t.shape[0]} targets")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4):
        raise ValueError("probability rows must sum to 1")
    aucs = [_binary_auc(t == c, p[:, c]) for c in range(p.shape[1])]
    aucs = [a for a in aucs if a is not None]
    if not aucs:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(aucs))


def _binary_auc(pos: np.ndarray, scores: np.ndarray) -> float | None:
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class MetricsReport:
    """Metrics for one evaluation, or the mean/std over several folds."""

    accuracy: float
    auc_macro_ovr: float | None
    qwk: float
    std: dict[str, float] = field(default_factory=dict)
    per_fold: list[dict[str, float | None]] = field(default_factory=list)
    meta: dict = field(default_factory=lambda: {"auc": "macro one-vs-rest, Mann-Whitney"})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def csv_row(self, method: str) -> list[str]:
        row = [method]
        for name in METRIC_NAMES:
            value = getattr(self, name)
            row.append("n/a" if value is None else f"{value:.3f}±{self.std.get(name, 0.0):.3f}")
        return row


def evaluate(targets, probs, num_classes: int) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    preds = np.argmax(probs, axis=1)
    try:
        auc = auc_macro_ovr(targets, probs)
    except ValueError:
        auc = None
    return MetricsReport(accuracy(targets, preds), auc, qwk(targets, preds, num_classes))


def aggregate_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("aggregate_folds needs at least one report")
    per_fold = [{k: getattr(r, k) for k in METRIC_NAMES} for r in reports]
    mean, std = {}, {}
    for k in METRIC_NAMES:
        vals = [v[k] for v in per_fold if v[k] is not None]
        mean[k] = float(np.mean(vals)) if vals else None
        std[k] = float(np.std(vals)) if vals else 0.0
    return MetricsReport(mean["accuracy"], mean["auc_macro_ovr"], mean["qwk"], std, per_fold)


def reports_to_csv(named: Sequence[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "accuracy", "auc", "qwk"])
    for name, rep in named:
        writer.writerow(rep.csv_row(name))
    return buf.getvalue()
