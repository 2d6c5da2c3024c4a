"""Stratified percentile bootstrap for threshold metrics and AUC.

Resampling with replacement inside each class stratum is drawn as
multinomial counts over the stratum's members. Every metric of an
iteration is then a weighted tally of those counts, so no resampled copy
of the data is ever materialised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientClassError, ShapeError, UnstableMetricError

METRICS = ("accuracy", "precision", "recall", "f1", "auc")
CLASSES = ("hypo", "normo")


@dataclass(frozen=True)
class ConfidenceInterval:
    low: float
    high: float
    level: float = 0.95
    iterations: int = 1000
    seed: int = 0
    undefined_iterations: int = 0

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high

    @property
    def width(self) -> float:
        return self.high - self.low

    def as_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "level": self.level, "iterations": self.iterations,
                "seed": self.seed, "undefined_iterations": self.undefined_iterations}


def _strata(scores, predictions, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    p = np.asarray(predictions).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if not (len(s) == len(p) == len(y)):
        raise ShapeError("scores, predictions and labels differ in length")
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise InsufficientClassError("stratified bootstrap needs both classes present")
    return s, p, pos, neg


def bootstrap_replicates(scores, predictions, labels, iterations: int = 1000, seed: int = 0,
                         chunk: int = 250) -> dict[tuple[str, str], tuple[np.ndarray, np.ndarray]]:
    """Per-iteration metric values and undefined flags.

    Keys are ``(class, metric)``; accuracy and AUC appear under both
    classes with equal values.
    """
    s, p, pos, neg = _strata(scores, predictions, labels)
    n_pos, n_neg = len(pos), len(neg)
    n = n_pos + n_neg
    rng = np.random.default_rng(seed)
    pred_pos = p[pos].astype(np.float64)
    pred_neg = p[neg].astype(np.float64)
    # AUC pieces: negatives sorted by score; for each positive, how many
    # sorted negatives lie strictly below it and how many tie it
    neg_sorted = np.argsort(s[neg], kind="stable")
    sn = s[neg][neg_sorted]
    below = np.searchsorted(sn, s[pos], side="left")
    upto = np.searchsorted(sn, s[pos], side="right")

    out: dict[str, list[np.ndarray]] = {k: [] for k in ("tp", "fp", "auc")}
    for a in range(0, iterations, chunk):
        m = min(chunk, iterations - a)
        cp = rng.multinomial(n_pos, np.full(n_pos, 1.0 / n_pos), size=m).astype(np.float64)
        cn = rng.multinomial(n_neg, np.full(n_neg, 1.0 / n_neg), size=m).astype(np.float64)
        out["tp"].append(cp @ pred_pos)
        out["fp"].append(cn @ pred_neg)
        cum = np.concatenate([np.zeros((m, 1)), np.cumsum(cn[:, neg_sorted], axis=1)], axis=1)
        lt = cum[:, below]
        le = cum[:, upto]
        out["auc"].append((cp * (lt + 0.5 * (le - lt))).sum(axis=1) / (n_pos * n_neg))
    tp = np.concatenate(out["tp"])
    fp = np.concatenate(out["fp"])
    auc = np.concatenate(out["auc"])
    fn = n_pos - tp
    tn = n_neg - fp
    acc = (tp + tn) / n
    never = np.zeros(iterations, dtype=bool)

    def per_class(tp, fp, fn):
        pden, rden, fden = tp + fp, tp + fn, 2 * tp + fp + fn
        with np.errstate(divide="ignore", invalid="ignore"):
            return {
                "precision": (np.where(pden > 0, tp / pden, 0.0), pden == 0),
                "recall": (np.where(rden > 0, tp / rden, 0.0), rden == 0),
                "f1": (np.where(fden > 0, 2 * tp / fden, 0.0), fden == 0),
            }

    res = {}
    for cls, (a_, b_, c_) in (("hypo", (tp, fp, fn)), ("normo", (tn, fn, fp))):
        for metric, val in per_class(a_, b_, c_).items():
            res[(cls, metric)] = val
        res[(cls, "accuracy")] = (acc, never)
        res[(cls, "auc")] = (auc, never)
    return res


def percentile_ci(values: np.ndarray, undefined: np.ndarray, level: float = 0.95, seed: int = 0,
                  name: str = "metric") -> ConfidenceInterval:
    iterations = len(values)
    bad = int(np.sum(undefined))
    if bad * 2 > iterations:
        raise UnstableMetricError(f"{name} undefined in {bad} of {iterations} bootstrap iterations")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values[~undefined], [100 * alpha, 100 * (1 - alpha)], method="linear")
    return ConfidenceInterval(float(lo), float(hi), level, iterations, seed, bad)


def stratified_bootstrap_ci(scores, predictions, labels, metric: str = "accuracy", cls: str = "hypo",
                            iterations: int = 1000, level: float = 0.95, seed: int = 0) -> ConfidenceInterval:
    """Percentile CI for one metric of one class."""
    if metric not in METRICS or cls not in CLASSES:
        raise ValueError(f"unknown metric {cls}/{metric}")
    if not 0.0 < level < 1.0 or iterations < 1:
        raise ValueError("level must lie in (0, 1) and iterations be >= 1")
    values, undefined = bootstrap_replicates(scores, predictions, labels, iterations, seed)[(cls, metric)]
    return percentile_ci(values, undefined, level, seed, f"{cls} {metric}")


def bootstrap_all(scores, predictions, labels, iterations: int = 1000, level: float = 0.95,
                  seed: int = 0) -> dict[str, dict[str, ConfidenceInterval | None]]:
    """CIs for every metric of both classes from one shared set of
    resamples. Metrics too often undefined map to ``None``."""
    reps = bootstrap_replicates(scores, predictions, labels, iterations, seed)
    out: dict[str, dict[str, ConfidenceInterval | None]] = {c: {} for c in CLASSES}
    for (cls, metric), (values, undefined) in reps.items():
        try:
            out[cls][metric] = percentile_ci(values, undefined, level, seed, f"{cls} {metric}")
        except UnstableMetricError:
            out[cls][metric] = None
    return out
