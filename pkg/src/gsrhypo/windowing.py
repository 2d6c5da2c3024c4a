"""Labeled 12-step windows, leakage-safe splits, class weights and the
balanced mini-batch sampler."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dsp import Stage, UniformSeries
from .errors import ConfigError, InsufficientClassError, InvalidGlucoseError

HYPO_THRESHOLD = 70.0
WIDTH = 12


class GlycemicLabel(enum.IntEnum):
    NORMO = 0
    HYPO = 1


def label_glucose(g: float) -> GlycemicLabel:
    """Hypo iff glucose is strictly below 70 mg/dL."""
    if not math.isfinite(g) or g <= 0:
        raise InvalidGlucoseError(f"glucose must be finite and positive, got {g}")
    return GlycemicLabel.HYPO if g < HYPO_THRESHOLD else GlycemicLabel.NORMO


def label_array(glucose: np.ndarray) -> np.ndarray:
    """Vectorised :func:`label_glucose`; returns 1 for Hypo, 0 for Normo."""
    g = np.asarray(glucose, dtype=float)
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise InvalidGlucoseError("glucose must be finite and positive")
    return (g < HYPO_THRESHOLD).astype(np.int8)


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    subject_id: str
    start_index: int
    gsr_seq: np.ndarray
    glucose_final: float
    label: GlycemicLabel


@dataclass(eq=False)
class WindowSet:
    """Columnar collection of windows. Row ``i`` is one :class:`LabeledWindow`."""

    subject_ids: np.ndarray
    start_index: np.ndarray
    gsr: np.ndarray
    glucose_final: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledWindow:
        return LabeledWindow(
            str(self.subject_ids[i]),
            int(self.start_index[i]),
            self.gsr[i],
            float(self.glucose_final[i]),
            GlycemicLabel(int(self.labels[i])),
        )

    def __iter__(self) -> Iterator[LabeledWindow]:
        return (self[i] for i in range(len(self)))

    @property
    def width(self) -> int:
        return self.gsr.shape[1]

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(
            self.subject_ids[idx], self.start_index[idx], self.gsr[idx],
            self.glucose_final[idx], self.labels[idx],
        )

    @classmethod
    def empty(cls, width: int = WIDTH) -> "WindowSet":
        return cls(np.empty(0, dtype=str), np.empty(0, np.int64), np.empty((0, width)),
                   np.empty(0), np.empty(0, np.int8))

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.subject_ids for p in parts]),
            np.concatenate([p.start_index for p in parts]),
            np.concatenate([p.gsr for p in parts]),
            np.concatenate([p.glucose_final for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )

    def to_csv(self) -> bytes:
        out = io.StringIO()
        cols = ["subject_id", "start_index"] + [f"gsr{i}" for i in range(self.width)]
        out.write(",".join(cols + ["glucose_final", "label"]) + "\n")
        for i in range(len(self)):
            vals = ",".join(repr(v) for v in self.gsr[i].tolist())
            lab = "hypo" if self.labels[i] else "normo"
            out.write(f"{self.subject_ids[i]},{self.start_index[i]},{vals},{float(self.glucose_final[i])!r},{lab}\n")
        return out.getvalue().encode("utf-8")

    @classmethod
    def from_csv(cls, data: bytes) -> "WindowSet":
        rows = list(csv.reader(io.StringIO(data.decode("utf-8"))))
        header, rows = rows[0], rows[1:]
        width = len(header) - 4
        if not rows:
            return cls.empty(width)
        sid = np.array([r[0] for r in rows])
        start = np.array([int(r[1]) for r in rows], dtype=np.int64)
        gsr = np.array([[float(v) for v in r[2:2 + width]] for r in rows])
        gf = np.array([float(r[2 + width]) for r in rows])
        lab = np.array([1 if r[3 + width] == "hypo" else 0 for r in rows], dtype=np.int8)
        return cls(sid, start, gsr, gf, lab)


def make_windows(series: UniformSeries, width: int = WIDTH, stride: int = 1) -> WindowSet:
    """Every ``width``-step window (at ``stride``) whose GSR values and final
    glucose reading are all present, labeled from that final glucose."""
    if series.stage != Stage.STANDARDIZED:
        raise ValueError(f"series must be standardized, got {series.stage.name}")
    n = len(series)
    if n < width:
        return WindowSet.empty(width)
    ok = ~np.isnan(series.gsr)
    run = np.concatenate([[0], np.cumsum(ok)])
    starts = np.arange(0, n - width + 1, stride)
    full = (run[starts + width] - run[starts]) == width
    final_g = series.glucose[starts + width - 1]
    keep = starts[full & ~np.isnan(final_g)]
    if len(keep) == 0:
        return WindowSet.empty(width)
    gsr = np.lib.stride_tricks.sliding_window_view(series.gsr, width)[keep].copy()
    gf = series.glucose[keep + width - 1]
    return WindowSet(
        np.full(len(keep), series.subject_id), keep.astype(np.int64), gsr, gf, label_array(gf)
    )


def static_feature(w: LabeledWindow) -> float:
    """Mean GSR over the window."""
    return float(np.mean(w.gsr_seq))


def static_features(ws: WindowSet) -> np.ndarray:
    return ws.gsr.mean(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# splits


@dataclass(eq=False)
class SplitAssignment:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    dropped: np.ndarray
    seed: int

    def parts(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _blocks(ws: WindowSet, width: int, block_len: int) -> list[np.ndarray]:
    """Chunk each subject's windows into runs of about ``block_len``.

    Overlapping windows are first grouped into connected runs; long runs
    are cut, preferring a cut whose following ``width - 1`` windows are all
    Normo so any guard windows dropped later carry no Hypo labels.
    """
    blocks: list[np.ndarray] = []
    order = np.lexsort((ws.start_index, ws.subject_ids))
    sid, start, lab = ws.subject_ids[order], ws.start_index[order], ws.labels[order]
    brk = np.flatnonzero((sid[1:] != sid[:-1]) | (np.diff(start) >= width)) + 1
    for run in np.split(np.arange(len(order)), brk):
        pos = 0
        while pos < len(run):
            cut = pos + block_len
            if cut >= len(run) - block_len // 2:
                cut = len(run)
            else:
                limit = min(cut + block_len // 2, len(run) - width)
                c = cut
                while c < limit and lab[run[c:c + width - 1]].any():
                    c += 1
                if c < limit:
                    cut = c
            blocks.append(order[run[pos:cut]])
            pos = cut
    return blocks


def stratified_split(
    ws: WindowSet,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    width: int | None = None,
    block_len: int = 72,
) -> SplitAssignment:
    """Block-level stratified train/val/test assignment.

    Blocks are visited in seeded random order (Hypo-rich blocks first) and
    each goes to the split that leaves the per-class counts closest, in a
    chi-square sense, to their targets. Where two neighbouring blocks of a
    subject land in different splits, the first ``width - 1`` windows of
    the later block are dropped so no grid index is shared across splits.
    """
    width = ws.width if width is None else width
    frac = np.asarray(fractions, dtype=float)
    if frac.shape != (3,) or np.any(frac < 0) or abs(frac.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    n_hypo = int(ws.labels.sum())
    n_normo = len(ws) - n_hypo
    if min(n_hypo, n_normo) < 10:
        raise InsufficientClassError(f"need >= 10 windows per class, got hypo={n_hypo} normo={n_normo}")

    rng = np.random.default_rng(seed)
    blocks = _blocks(ws, width, block_len)
    h = np.array([int(ws.labels[b].sum()) for b in blocks])
    m = np.array([len(b) for b in blocks]) - h
    perm = rng.permutation(len(blocks))
    visit = perm[np.argsort(-h[perm], kind="stable")]

    target = np.outer(frac, [n_hypo, n_normo])
    scale = np.maximum(target, 1.0)
    counts = np.zeros((3, 2))
    assign = np.empty(len(blocks), dtype=np.int64)
    for b in visit:
        add = np.array([h[b], m[b]])
        base = ((counts - target) ** 2 / scale).sum(axis=1)
        after = ((counts + add - target) ** 2 / scale).sum(axis=1)
        cost = after - base
        cost[frac == 0] = np.inf
        s = int(np.argmin(cost))
        assign[b] = s
        counts[s] += add

    dropped: list[np.ndarray] = []
    parts: list[list[np.ndarray]] = [[], [], []]
    # blocks come out subject by subject in start order
    prev_sid, prev_last, prev_split = None, None, None
    for i, b in enumerate(blocks):
        keep = b
        sid = ws.subject_ids[b[0]]
        if sid == prev_sid and prev_split != assign[i]:
            clash = ws.start_index[b] <= prev_last + width - 1
            dropped.append(b[clash])
            keep = b[~clash]
        parts[assign[i]].append(keep)
        if len(keep):
            prev_sid, prev_last, prev_split = sid, ws.start_index[keep[-1]], assign[i]

    cat = lambda xs: np.sort(np.concatenate(xs)) if xs else np.empty(0, np.int64)
    return SplitAssignment(cat(parts[0]), cat(parts[1]), cat(parts[2]), cat(dropped), seed)


# --------------------------------------------------------------------------
# class imbalance


@dataclass(frozen=True)
class ClassWeights:
    w_hypo: float = 1.0
    w_normo: float = 1.0
    scale_pos_weight: float = 1.0

    def per_sample(self, y: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(y) == 1, self.w_hypo, self.w_normo).astype(float)


UNIT_WEIGHTS = ClassWeights()


def class_weights(train_labels) -> ClassWeights:
    """Balanced ``N / (2 N_c)`` weights plus ``N_normo / N_hypo``."""
    y = np.asarray([int(v) for v in train_labels] if not isinstance(train_labels, np.ndarray) else train_labels)
    n = len(y)
    n_hypo = int((y == 1).sum())
    n_normo = n - n_hypo
    if n_hypo == 0 or n_normo == 0:
        raise InsufficientClassError("class weights need both classes present")
    return ClassWeights(n / (2.0 * n_hypo), n / (2.0 * n_normo), n_normo / n_hypo)


class BalancedBatchSampler:
    """Mini-batches that visit every majority window once per epoch and top
    each batch up with minority windows drawn with replacement.

    A full batch holds ``floor(batch_size * min_minority_fraction)`` minority
    windows; the final, shorter run of majority windows is topped up to a
    full batch. Only indices of real windows are ever emitted.
    """

    def __init__(self, labels, batch_size: int = 64, min_minority_fraction: float = 0.25, seed: int = 0):
        if not 0.0 <= min_minority_fraction < 1.0:
            raise ConfigError(f"min_minority_fraction must lie in [0, 1), got {min_minority_fraction}")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        y = np.asarray(labels)
        pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y != 1)
        if len(pos) == 0 or len(neg) == 0:
            raise InsufficientClassError("balanced sampling needs both classes present")
        self.minority, self.majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
        self.batch_size = batch_size
        self.n_minority = int(math.floor(batch_size * min_minority_fraction))
        if self.n_minority == batch_size:
            self.n_minority = batch_size - 1
        self.seed = seed

    def epoch(self, e: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, e])
        order = rng.permutation(self.majority)
        per = self.batch_size - self.n_minority
        out = []
        for a in range(0, len(order), per):
            maj = order[a:a + per]
            extra = rng.choice(self.minority, self.batch_size - len(maj), replace=True)
            out.append(np.concatenate([maj, extra]))
        return out

    def __iter__(self) -> Iterator[np.ndarray]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def shuffled_batches(n: int, batch_size: int, seed: int, e: int) -> list[np.ndarray]:
    """Plain shuffled mini-batches over ``range(n)`` for epoch ``e``."""
    order = np.random.default_rng([seed, e]).permutation(n)
    return [order[a:a + batch_size] for a in range(0, n, batch_size)]
