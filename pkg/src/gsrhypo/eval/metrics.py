"""Confusion counts, threshold metrics and rank-based ROC AUC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InsufficientClassError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    """Counts with Hypo as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def flipped(self) -> "ConfusionCounts":
        """The same table with Normo treated as positive."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float = float("nan")
    undefined: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "auc": self.auc, "undefined": list(self.undefined)}


def _as_labels(x, name: str) -> np.ndarray:
    a = np.asarray([int(v) for v in x] if not isinstance(x, np.ndarray) else x).astype(np.int64).ravel()
    if a.size and not np.isin(a, (0, 1)).all():
        raise ShapeError(f"{name} must be binary labels (Hypo=1, Normo=0)")
    return a


def confusion(predictions, labels) -> ConfusionCounts:
    p = _as_labels(predictions, "predictions")
    y = _as_labels(labels, "labels")
    if p.shape != y.shape:
        raise ShapeError(f"{len(p)} predictions for {len(y)} labels")
    if len(y) == 0:
        raise ShapeError("cannot tally an empty evaluation set")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return ConfusionCounts(tp, fp, fn, len(y) - tp - fp - fn)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def metrics_from_confusion(c: ConfusionCounts, auc: float = float("nan")) -> MetricSet:
    """Accuracy, precision, recall and F1 for the positive class of ``c``.

    A 0/0 ratio is reported as 0 and its name listed in ``undefined``.
    """
    if c.total <= 0:
        raise ShapeError("confusion table is empty")
    undefined = []
    precision, bad = _ratio(c.tp, c.tp + c.fp)
    if bad:
        undefined.append("precision")
    recall, bad = _ratio(c.tp, c.tp + c.fn)
    if bad:
        undefined.append("recall")
    f1, bad = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    if bad:
        undefined.append("f1")
    return MetricSet((c.tp + c.tn) / c.total, precision, recall, f1, auc, tuple(undefined))


def _binary_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_labels(labels, "labels")
    if s.shape != y.shape:
        raise ShapeError(f"{len(s)} scores for {len(y)} labels")
    if np.isnan(s).any():
        raise ShapeError("scores contain NaN")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise InsufficientClassError("AUC needs both classes present")
    return s, y


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counting one half. Computed from midranks with integer arithmetic, so
    it equals the brute-force pair count exactly."""
    s, y = _binary_scores(scores, labels)
    order = np.argsort(s, kind="stable")
    ss = s[order]
    # twice the midrank: first + last 1-based position of each tie group
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], len(ss)]
    twice_rank = np.repeat(starts + ends + 1, ends - starts)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    twice_sum = int(twice_rank[y[order] == 1].sum())
    # pairs won (ties half) = rank_sum - n_pos (n_pos + 1) / 2
    twice_u = twice_sum - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg)


def roc_auc_bruteforce(scores, labels) -> float:
    """Quadratic reference implementation of :func:`roc_auc`."""
    s, y = _binary_scores(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (wins + ties / 2) / (len(pos) * len(neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, threshold) with one point per distinct score, plus the
    origin at threshold +inf. A sample counts as positive when score >= threshold."""
    s, y = _binary_scores(scores, labels)
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    last = np.r_[np.flatnonzero(ss[1:] != ss[:-1]), len(ss) - 1]
    tps = np.cumsum(yy)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = int(y.sum()), len(y) - int(y.sum())
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, ss[last]]
    return fpr, tpr, thr
