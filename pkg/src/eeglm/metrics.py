"""Classification metrics: balanced accuracy, Cohen's kappa, weighted F1,
AUROC and AUC-PR (average precision)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class EvalRecord:
    true: int
    pred: int
    scores: tuple[float, ...]

    def __post_init__(self):
        if self.scores and abs(sum(self.scores) - 1.0) > 1e-6:
            raise ValueError(f"scores sum to {sum(self.scores)}, expected 1")
        n = len(self.scores)
        if n and not (0 <= self.true < n):
            raise ValueError(f"true class {self.true} outside 0..{n - 1}")


@dataclass(frozen=True)
class MetricsReport:
    balanced_accuracy: float
    cohens_kappa: float
    weighted_f1: float
    auroc: float | None = None
    auc_pr: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    y = np.array([r.true for r in records], dtype=np.int64)
    p = np.array([r.pred for r in records], dtype=np.int64)
    return y, p


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions; predictions outside the range are dropped."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    ok = (y_pred >= 0) & (y_pred < n_classes)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y_true[ok], y_pred[ok]), 1)
    return m


def balanced_accuracy(y_true, y_pred, n_classes: int | None = None) -> float:
    y_true = np.asarray(y_true)
    n = int(y_true.max()) + 1 if n_classes is None else n_classes
    support = np.bincount(y_true, minlength=n)
    if np.any(support == 0):
        raise ValueError(f"classes {np.flatnonzero(support == 0).tolist()} have no true instance")
    hits = np.bincount(y_true[np.asarray(y_pred) == y_true], minlength=n)
    return float(np.mean(hits / support))


def cohens_kappa(y_true, y_pred, n_classes: int | None = None) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(np.unique(y_true)) < 2:
        raise ValueError("kappa needs at least two distinct true classes")
    n = max(int(y_true.max()), int(y_pred.max())) + 1 if n_classes is None else n_classes
    total = len(y_true)
    p_o = float(np.mean(y_true == y_pred))
    p_e = float(np.dot(np.bincount(y_true, minlength=n), np.bincount(y_pred[y_pred >= 0], minlength=n))) / total**2
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def weighted_f1(y_true, y_pred, n_classes: int | None = None) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = max(int(y_true.max()), int(y_pred.max())) + 1 if n_classes is None else n_classes
    m = confusion(y_true, y_pred, n).astype(np.float64)
    tp = np.diag(m)
    support = m.sum(axis=1) + np.bincount(y_true[(y_pred < 0) | (y_pred >= n)], minlength=n)
    predicted = m.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(np.sum(support / support.sum() * f1))


def auroc(y_true, scores) -> float:
    """Probability that a random positive outscores a random negative; ties count one half."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes in the truth")
    # Mann-Whitney U from average ranks
    u = rankdata(s)[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(y_true, scores) -> float:
    """Average precision: sum over distinct thresholds of (delta recall) x precision."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tp = np.cumsum(y_sorted)[ends]
    k = ends + 1
    precision = tp / k
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def evaluate_records(records: list[EvalRecord], n_classes: int) -> MetricsReport:
    y, p = _arrays(records)
    ba = balanced_accuracy(y, p, n_classes)
    kappa = cohens_kappa(y, p, n_classes)
    f1 = weighted_f1(y, p, n_classes)
    if n_classes != 2:
        return MetricsReport(ba, kappa, f1)
    pos = np.array([r.scores[1] for r in records])
    return MetricsReport(ba, kappa, f1, auroc(y, pos), auc_pr(y, pos))


def monitor_score(report: MetricsReport, n_classes: int) -> float:
    """AUROC for binary tasks, kappa otherwise (checkpoint selection)."""
    return report.auroc if n_classes == 2 else report.cohens_kappa


def write_report(path, reports: dict[str, MetricsReport], extra: dict | None = None) -> None:
    body = {"tasks": {task: r.to_dict() for task, r in sorted(reports.items())}}
    body.update(extra or {})
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
