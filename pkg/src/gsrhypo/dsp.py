"""Per-subject signal conditioning onto the 5-minute CGM grid.

Pipeline order is fixed: align -> IQR mask -> low-pass -> z-score. Only
the GSR channel is conditioned; glucose stays in raw mg/dL because labels
are read from it. Missing values are NaN throughout.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import sosfilt

from .errors import (
    ConfigError,
    DegenerateSignalError,
    EmptyChannelError,
    GsrHypoError,
    InsufficientDataError,
    with_subject,
)
from .ingest import STEP_SECONDS, Channel, SubjectRecord, format_timestamp

GLUCOSE_TOLERANCE_S = STEP_SECONDS // 2


class Stage(enum.IntEnum):
    ALIGNED = 1
    MASKED = 2
    FILTERED = 3
    STANDARDIZED = 4


@dataclass(frozen=True, eq=False)
class UniformSeries:
    subject_id: str
    start: int
    glucose: np.ndarray
    gsr: np.ndarray
    stage: Stage = Stage.ALIGNED
    period: int = field(default=STEP_SECONDS)

    def __post_init__(self):
        if len(self.glucose) != len(self.gsr):
            raise ValueError("glucose and gsr must have equal length")
        if self.period != STEP_SECONDS:
            raise ValueError("period is fixed at 5 minutes")

    def __len__(self) -> int:
        return len(self.glucose)

    def advance(self, stage: Stage, gsr: np.ndarray) -> "UniformSeries":
        if stage <= self.stage:
            raise ValueError(f"cannot move from {self.stage.name} to {stage.name}")
        return replace(self, gsr=gsr, stage=stage)

    def to_csv(self) -> bytes:
        """Debug dump as ``timestamp,glucose,gsr,stage``; blanks mark missing."""
        out = io.StringIO()
        out.write("timestamp,glucose,gsr,stage\n")
        fmt = lambda v: "" if math.isnan(v) else repr(v)
        for i, (g, s) in enumerate(zip(self.glucose.tolist(), self.gsr.tolist())):
            ts = format_timestamp(self.start + i * self.period)
            out.write(f"{ts},{fmt(g)},{fmt(s)},{self.stage.name.lower()}\n")
        return out.getvalue().encode("utf-8")


@dataclass(frozen=True)
class FilterSpec:
    order: int = 2
    cutoff: float = 0.1

    def validate(self) -> "FilterSpec":
        if not isinstance(self.order, (int, np.integer)) or self.order < 1:
            raise ConfigError(f"filter order must be an integer >= 1, got {self.order}")
        if not 0.0 < self.cutoff < 0.5:
            raise ConfigError(f"cutoff must lie strictly inside (0, 0.5), got {self.cutoff}")
        return self


# --------------------------------------------------------------------------
# alignment


def _interpolate_short_gaps(values: np.ndarray, max_gap: int) -> np.ndarray:
    out = values.copy()
    valid = ~np.isnan(values)
    if valid.sum() < 2:
        return out
    idx = np.flatnonzero(valid)
    # gap length between consecutive valued bins
    gaps = np.diff(idx) - 1
    for left, gap in zip(idx[:-1][(gaps > 0) & (gaps <= max_gap)], gaps[(gaps > 0) & (gaps <= max_gap)]):
        right = left + gap + 1
        frac = np.arange(1, gap + 1) / (gap + 1)
        out[left + 1:right] = values[left] + frac * (values[right] - values[left])
    return out


def align_to_grid(glucose: Channel, gsr: Channel, max_gap: int = 3, subject_id: str = "") -> UniformSeries:
    """Put both channels on the 5-minute grid anchored at the first CGM reading.

    GSR bins hold the mean of samples in ``[bin_start, bin_start + 5 min)``;
    runs of at most ``max_gap`` empty bins between two valued bins are filled
    linearly. Each glucose bin takes the reading nearest its start within
    +/- 2.5 minutes (earlier reading on ties).
    """
    if len(glucose) == 0:
        raise EmptyChannelError(f"subject {subject_id}: empty glucose channel")
    gt = glucose.times
    anchor = int(gt[0])
    n = 1 + (int(gt[-1]) - anchor) // STEP_SECONDS
    starts = anchor + np.arange(n, dtype=np.int64) * STEP_SECONDS

    right = np.searchsorted(gt, starts, side="left")
    left = right - 1
    d_right = np.where(right < len(gt), gt[np.minimum(right, len(gt) - 1)] - starts, np.iinfo(np.int64).max)
    d_left = np.where(left >= 0, starts - gt[np.maximum(left, 0)], np.iinfo(np.int64).max)
    pick = np.where(d_left <= d_right, left, right)
    dist = np.minimum(d_left, d_right)
    g = np.full(n, np.nan)
    ok = dist <= GLUCOSE_TOLERANCE_S
    g[ok] = glucose.values[pick[ok]]

    bins = (gsr.times - anchor) // STEP_SECONDS
    inside = (gsr.times >= anchor) & (bins < n)
    sums = np.bincount(bins[inside], weights=gsr.values[inside], minlength=n)
    counts = np.bincount(bins[inside], minlength=n)
    s = np.full(n, np.nan)
    has = counts > 0
    s[has] = sums[has] / counts[has]
    s = _interpolate_short_gaps(s, max_gap)
    return UniformSeries(subject_id, anchor, g, s, Stage.ALIGNED)


# --------------------------------------------------------------------------
# outliers


def iqr_fences(values: np.ndarray, k: float = 1.5) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if len(v) < 4:
        raise InsufficientDataError(f"IQR needs at least 4 values, got {len(v)}")
    q1, q3 = np.percentile(v, [25.0, 75.0])
    spread = q3 - q1
    return float(q1 - k * spread), float(q3 + k * spread)


def iqr_mask(values, k: float = 1.5, fences: tuple[float, float] | None = None) -> np.ndarray:
    """Replace values outside ``[Q1 - k*IQR, Q3 + k*IQR]`` with NaN.

    Quartiles use linear interpolation on ``p*(n-1)`` positions. Pass
    ``fences`` to reuse previously computed bounds.
    """
    v = np.asarray(values, dtype=float)
    lo, hi = fences if fences is not None else iqr_fences(v, k)
    out = v.copy()
    with np.errstate(invalid="ignore"):
        out[(v < lo) | (v > hi)] = np.nan
    return out


# --------------------------------------------------------------------------
# Butterworth low-pass


def butterworth_sos(order: int, cutoff: float) -> np.ndarray:
    """Digital Butterworth low-pass as second-order sections.

    Analog prototype poles are scaled to the pre-warped cutoff
    ``2*tan(pi*cutoff)`` (sample rate 1) and mapped through the bilinear
    transform. Each section is normalised to unit DC gain. Rows are
    ``[b0, b1, b2, 1, a1, a2]``.
    """
    FilterSpec(order, cutoff).validate()
    warped = 2.0 * math.tan(math.pi * cutoff)
    k = np.arange(1, order + 1)
    analog = warped * np.exp(1j * math.pi * (2 * k + order - 1) / (2 * order))
    digital = (2.0 + analog) / (2.0 - analog)

    sections = []
    for z in digital[: order // 2]:
        a1, a2 = -2.0 * z.real, abs(z) ** 2
        gain = (1.0 + a1 + a2) / 4.0
        sections.append([gain, 2.0 * gain, gain, 1.0, a1, a2])
    if order % 2:
        zr = digital[order // 2].real
        gain = (1.0 - zr) / 2.0
        sections.append([gain, gain, 0.0, 1.0, -zr, 0.0])
    return np.array(sections)


def _steady_state(sos: np.ndarray) -> np.ndarray:
    # transposed direct form II state for a unit step held forever
    b1, b2, a1, a2 = sos[:, 1], sos[:, 2], sos[:, 4], sos[:, 5]
    z2 = b2 - a2
    return np.stack([b1 - a1 + z2, z2], axis=1)


def _pad_length(sos: np.ndarray) -> int:
    poles = np.concatenate([np.roots(row[3:]) for row in sos])
    r = float(np.max(np.abs(poles))) if len(poles) else 0.0
    if r <= 1e-3:
        return 8
    return int(min(20000, math.ceil(math.log(1e-15) / math.log(r))))


def sos_filter(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Single causal pass from rest (zero initial state)."""
    return sosfilt(sos, np.asarray(x, dtype=float))


def filtfilt_segment(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Forward-backward pass over one gap-free segment.

    The ends are extended by their edge values for long enough that the
    start-up transient decays below double precision, and each pass
    starts from the steady state of its first input.
    """
    pad = _pad_length(sos)
    ext = np.concatenate([np.full(pad, x[0]), x, np.full(pad, x[-1])])
    zi = _steady_state(sos)
    fwd, _ = sosfilt(sos, ext, zi=zi * ext[0])
    back, _ = sosfilt(sos, fwd[::-1], zi=zi * fwd[-1])
    return back[::-1][pad:-pad]


def _segments(valid: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], valid.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def butterworth_lowpass(values, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase low-pass of each contiguous non-missing run.

    Runs shorter than ``3 * order`` samples are passed through unchanged.
    """
    spec.validate()
    v = np.asarray(values, dtype=float)
    sos = butterworth_sos(spec.order, spec.cutoff)
    out = v.copy()
    for a, b in _segments(~np.isnan(v)):
        if b - a >= 3 * spec.order:
            out[a:b] = filtfilt_segment(sos, v[a:b])
    return out


# --------------------------------------------------------------------------
# standardisation


def zscore_per_subject(values) -> np.ndarray:
    """``(x - mean) / std`` over non-missing entries (population std)."""
    v = np.asarray(values, dtype=float)
    present = v[~np.isnan(v)]
    if len(present) < 2:
        raise InsufficientDataError(f"z-score needs at least 2 values, got {len(present)}")
    mu = present.mean()
    sigma = present.std()
    if sigma == 0.0 or sigma <= 1e-12 * abs(mu):
        raise DegenerateSignalError("GSR is constant across the subject (sensor failure?)")
    return (v - mu) / sigma


def preprocess_subject(
    record: SubjectRecord,
    spec: FilterSpec = FilterSpec(),
    max_gap: int = 3,
    k: float = 1.5,
) -> UniformSeries:
    try:
        series = align_to_grid(record.glucose, record.gsr, max_gap, record.subject_id)
        series = series.advance(Stage.MASKED, iqr_mask(series.gsr, k))
        series = series.advance(Stage.FILTERED, butterworth_lowpass(series.gsr, spec))
        return series.advance(Stage.STANDARDIZED, zscore_per_subject(series.gsr))
    except GsrHypoError as exc:
        raise with_subject(exc, record.subject_id) from exc
