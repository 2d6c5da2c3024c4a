"""Subject-file parsing, cohort merging and the synthetic cohort generator.

Raw channels are held as parallel numpy arrays: integer UTC epoch seconds
and float values. Iterating a :class:`Channel` yields :class:`TimedSample`
objects for callers that want the record view.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, ParseError, SchemaError
from .seeds import derive_seed

OHIO_TS_FORMAT = "%d-%m-%Y %H:%M:%S"
CANONICAL_TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
STEP_SECONDS = 300

GLUCOSE_TAGS = ("glucose_level", "glucose", "cgm")
GSR_TAGS = ("basis_gsr", "gsr", "eda")


class SourceTag(str, enum.Enum):
    OHIO2018 = "Ohio2018"
    OHIO2020 = "Ohio2020"
    SYNTHETIC = "Synthetic"

    @property
    def suffix(self) -> str:
        return {"Ohio2018": "2018", "Ohio2020": "2020", "Synthetic": "synthetic"}[self.value]


@dataclass(frozen=True)
class TimedSample:
    timestamp: datetime
    value: float


@dataclass(frozen=True, eq=False)
class Channel:
    """Strictly increasing epoch-second timestamps with one value each."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[TimedSample]:
        for t, v in zip(self.times.tolist(), self.values.tolist()):
            yield TimedSample(datetime.fromtimestamp(t, tz=timezone.utc), v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Channel):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.values, other.values)

    @classmethod
    def from_samples(cls, samples) -> "Channel":
        """Build from unsorted ``(epoch_seconds, value)`` pairs.

        Samples are sorted and duplicate timestamps collapse to their mean.
        """
        if len(samples) == 0:
            return cls(np.empty(0, np.int64), np.empty(0))
        t = np.fromiter((s[0] for s in samples), dtype=np.int64, count=len(samples))
        v = np.fromiter((s[1] for s in samples), dtype=np.float64, count=len(samples))
        return cls.collapse(t, v)

    @classmethod
    def collapse(cls, t: np.ndarray, v: np.ndarray) -> "Channel":
        order = np.argsort(t, kind="stable")
        t, v = t[order], v[order]
        uniq, start = np.unique(t, return_index=True)
        if len(uniq) == len(t):
            return cls(t, v)
        sums = np.add.reduceat(v, start)
        counts = np.diff(np.append(start, len(t)))
        return cls(uniq, sums / counts)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    glucose: Channel
    gsr: Channel
    source_tag: SourceTag = SourceTag.SYNTHETIC
    skipped_count: int = field(default=0, compare=False)


@dataclass
class Cohort:
    subjects: list[SubjectRecord] = field(default_factory=list)
    total_steps: int = 0

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 12
    steps_per_subject: int = 4400
    target_prevalence: float = 0.041
    coupling: float = 0.8
    noise_sd: float = 0.15
    seed: int = 7
    lead: int = 2

    def validate(self) -> "SynthConfig":
        if self.n_subjects < 1 or self.steps_per_subject < 1:
            raise ConfigError("n_subjects and steps_per_subject must be >= 1")
        if not 0.0 < self.target_prevalence < 1.0:
            raise ConfigError(f"target_prevalence must lie in (0, 1), got {self.target_prevalence}")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError(f"coupling must lie in [0, 1], got {self.coupling}")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.lead < 0:
            raise ConfigError("lead must be >= 0")
        return self


# --------------------------------------------------------------------------
# timestamps


def parse_timestamp(text: str) -> int:
    """Epoch seconds (UTC) from ``DD-MM-YYYY HH:MM:SS`` or ISO-8601."""
    text = text.strip()
    try:
        dt = datetime.strptime(text, OHIO_TS_FORMAT)
    except ValueError:
        iso = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
        dt = datetime.fromisoformat(iso)  # ValueError propagates
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    ts = dt.timestamp()
    if not math.isfinite(ts):
        raise ValueError(f"non-finite timestamp {text!r}")
    return int(math.floor(ts))


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime(CANONICAL_TS_FORMAT)


def _check_record(subject_id: str, glucose: Channel, gsr: Channel):
    if len(glucose) == 0:
        raise SchemaError(f"subject {subject_id}: glucose channel missing or empty")
    if len(gsr) == 0:
        raise SchemaError(f"subject {subject_id}: GSR channel missing or empty")
    if np.any(glucose.values <= 0):
        raise SchemaError(f"subject {subject_id}: non-positive glucose value")


# --------------------------------------------------------------------------
# XML


def parse_subject_xml(
    data: bytes,
    subject_id: str | None = None,
    source_tag: SourceTag = SourceTag.OHIO2018,
) -> SubjectRecord:
    """Parse one OhioT1DM-style subject file.

    Only the glucose and GSR channels are kept; every other channel is
    skipped without complaint.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}") from exc

    sid = subject_id or root.get("id") or "unknown"
    channels: dict[str, list[tuple[int, float]]] = {"glucose": [], "gsr": []}
    for elem in root.iter():
        tag = elem.tag.lower()
        if tag in GLUCOSE_TAGS:
            name = "glucose"
        elif tag in GSR_TAGS:
            name = "gsr"
        else:
            continue
        for i, event in enumerate(elem.findall("event")):
            where = f"<{elem.tag}>/event[{i}]"
            ts_text, val_text = event.get("ts"), event.get("value")
            if ts_text is None or val_text is None:
                raise SchemaError(f"subject {sid}: {where} lacks ts/value attribute")
            try:
                ts = parse_timestamp(ts_text)
            except ValueError as exc:
                raise SchemaError(f"subject {sid}: unparseable timestamp {ts_text!r} in {where}") from exc
            try:
                value = float(val_text)
            except ValueError as exc:
                raise SchemaError(f"subject {sid}: non-numeric value {val_text!r} in {where}") from exc
            if not math.isfinite(value):
                raise SchemaError(f"subject {sid}: non-finite value in {where}")
            channels[name].append((ts, value))

    glucose = Channel.from_samples(channels["glucose"])
    gsr = Channel.from_samples(channels["gsr"])
    _check_record(sid, glucose, gsr)
    return SubjectRecord(sid, glucose, gsr, source_tag)


# --------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for subject CSVs.

    Long layout (the canonical one) names ``channel`` and ``value``
    columns. Setting ``glucose`` and ``gsr`` switches to a wide layout
    with one value column per channel.
    """

    timestamp: str = "timestamp"
    channel: str | None = "channel"
    value: str | None = "value"
    glucose: str | None = None
    gsr: str | None = None
    max_bad_fraction: float = 0.10

    @property
    def wide(self) -> bool:
        return self.glucose is not None or self.gsr is not None


CANONICAL_SCHEMA = CsvSchema()


def parse_subject_csv(
    data: bytes,
    schema: CsvSchema = CANONICAL_SCHEMA,
    subject_id: str = "unknown",
    source_tag: SourceTag = SourceTag.SYNTHETIC,
) -> SubjectRecord:
    """Parse a subject CSV. Blank value cells are skipped and counted;
    non-numeric cells are tolerated up to ``schema.max_bad_fraction`` of rows."""
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise ParseError(f"subject {subject_id}: CSV is not UTF-8") from exc
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    if schema.wide:
        if schema.glucose is None or schema.gsr is None:
            raise ConfigError("wide CSV schema needs both glucose and gsr columns")
        needed = [schema.timestamp, schema.glucose, schema.gsr]
    else:
        needed = [schema.timestamp, schema.channel, schema.value]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"subject {subject_id}: missing column(s) {missing}; header is {header}")

    channels: dict[str, list[tuple[int, float]]] = {"glucose": [], "gsr": []}
    skipped = 0
    bad_rows: list[str] = []
    n_rows = 0
    for lineno, row in enumerate(reader, start=2):
        n_rows += 1
        try:
            ts = parse_timestamp(row[schema.timestamp] or "")
        except ValueError:
            bad_rows.append(f"line {lineno}: bad timestamp {row[schema.timestamp]!r}")
            continue
        if schema.wide:
            cells = [("glucose", row[schema.glucose]), ("gsr", row[schema.gsr])]
        else:
            name = (row[schema.channel] or "").strip().lower()
            if name not in channels:
                continue
            cells = [(name, row[schema.value])]
        row_bad = False
        for name, cell in cells:
            cell = (cell or "").strip()
            if not cell:
                skipped += 1
                continue
            try:
                value = float(cell)
            except ValueError:
                row_bad = True
                continue
            if not math.isfinite(value):
                row_bad = True
                continue
            channels[name].append((ts, value))
        if row_bad:
            bad_rows.append(f"line {lineno}: non-numeric value")

    if n_rows and len(bad_rows) > schema.max_bad_fraction * n_rows:
        raise ParseError(
            f"subject {subject_id}: {len(bad_rows)}/{n_rows} rows unparseable "
            f"(limit {schema.max_bad_fraction:.0%}); first: {bad_rows[0]}"
        )
    glucose = Channel.from_samples(channels["glucose"])
    gsr = Channel.from_samples(channels["gsr"])
    _check_record(subject_id, glucose, gsr)
    return SubjectRecord(subject_id, glucose, gsr, source_tag, skipped_count=skipped)


def write_subject_csv(record: SubjectRecord) -> bytes:
    """Serialize to the canonical long CSV (``timestamp,channel,value``)."""
    out = io.StringIO()
    out.write("timestamp,channel,value\n")
    for name, ch in (("glucose", record.glucose), ("gsr", record.gsr)):
        for t, v in zip(ch.times.tolist(), ch.values.tolist()):
            out.write(f"{format_timestamp(t)},{name},{v!r}\n")
    return out.getvalue().encode("utf-8")


# --------------------------------------------------------------------------
# cohorts


def merge_cohorts(a: Cohort, b: Cohort) -> Cohort:
    """Concatenate ``a`` then ``b``; colliding ids get a source-tag suffix."""
    subjects = list(a.subjects) + list(b.subjects)
    counts: dict[str, int] = {}
    for s in subjects:
        counts[s.subject_id] = counts.get(s.subject_id, 0) + 1
    out: list[SubjectRecord] = []
    used: set[str] = set()
    for s in subjects:
        new_id = s.subject_id
        if counts[s.subject_id] > 1:
            new_id = f"{s.subject_id}-{s.source_tag.suffix}"
        base, n = new_id, 2
        while new_id in used or (new_id != s.subject_id and new_id in counts):
            new_id = f"{base}-{n}"
            n += 1
        used.add(new_id)
        out.append(s if new_id == s.subject_id else replace(s, subject_id=new_id))
    return Cohort(out, a.total_steps + b.total_steps)


# --------------------------------------------------------------------------
# synthetic cohort

_EPOCH0 = int(datetime(2020, 1, 1, tzinfo=timezone.utc).timestamp())
_RAMP = 6            # steps of descent / recovery around an excursion
_MIN_GAP = 24        # steps of clearance between excursions
_DUR_RANGE = (3, 10)  # hypoglycemic steps per excursion


def _ou(rng: np.random.Generator, n: int, tau: float, sd: float) -> np.ndarray:
    """Stationary Ornstein-Uhlenbeck path sampled at unit steps."""
    a = math.exp(-1.0 / tau)
    innov = rng.normal(0.0, sd * math.sqrt(1 - a * a), n)
    innov[0] = rng.normal(0.0, sd)
    return lfilter([1.0], [1.0, -a], innov)


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi)


def _excursion_plan(rng, n_steps: int, n_hypo: int) -> list[tuple[int, int]]:
    """Non-overlapping ``(first_hypo_step, duration)`` pairs summing to ``n_hypo``."""
    durations = []
    left = n_hypo
    while left > 0:
        d = int(rng.integers(_DUR_RANGE[0], _DUR_RANGE[1] + 1))
        d = min(d, left)
        durations.append(d)
        left -= d
    rng.shuffle(durations)
    footprint = [d + 2 * _RAMP + _MIN_GAP for d in durations]
    free = n_steps - sum(footprint)
    if free < 0:
        raise ConfigError(
            f"target prevalence infeasible: {n_hypo} hypoglycemic steps do not fit in {n_steps} steps"
        )
    cuts = np.sort(rng.integers(0, free + 1, len(durations)))
    plan, pos = [], 0
    prev_cut = 0
    for d, fp, cut in zip(durations, footprint, cuts.tolist()):
        pos += cut - prev_cut
        prev_cut = cut
        plan.append((pos + _MIN_GAP // 2 + _RAMP, d))
        pos += fp
    return plan


def _synth_subject(cfg: SynthConfig, index: int) -> SubjectRecord:
    rng = np.random.default_rng(derive_seed(cfg.seed, "synth", index))
    T = cfg.steps_per_subject
    n_hypo = int(round(cfg.target_prevalence * T))
    plan = _excursion_plan(rng, T, n_hypo)

    # glucose: bounded mean-reverting walk kept clear of the threshold
    glucose = _reflect(150.0 + _ou(rng, T, tau=36.0, sd=35.0), 85.0, 380.0)
    for start, d in plan:
        pre, post = glucose[start - _RAMP], glucose[min(start + d + _RAMP, T - 1)]
        glucose[start - _RAMP:start] = np.linspace(pre, 74.0, _RAMP, endpoint=False)
        depth = rng.uniform(8.0, 25.0)
        phase = (np.arange(d) + 0.5) / d
        glucose[start:start + d] = np.minimum(70.0 - depth * np.sin(np.pi * phase), 69.5)
        end = min(start + d + _RAMP, T)
        glucose[start + d:end] = np.linspace(74.0, post, _RAMP, endpoint=False)[: end - start - d]
    hypo = glucose < 70.0
    cgm_noise = rng.normal(0.0, 1.5, T)
    glucose = np.where(hypo, np.minimum(glucose + cgm_noise, 69.5), np.maximum(glucose + cgm_noise, 70.5))
    glucose = np.round(glucose, 1)
    jitter = rng.integers(-20, 21, T)
    t0 = _EPOCH0 + index * 86400
    g_times = t0 + np.arange(T, dtype=np.int64) * STEP_SECONDS + jitter

    # GSR at 1-minute cadence, in grid-step units (5 samples per step)
    per = STEP_SECONDS // 60
    m = T * per
    u = np.arange(m) / per
    drift = np.repeat(_ou(rng, T, tau=240.0, sd=1.0), per)
    wobble = np.repeat(_ou(rng, T, tau=4.0, sd=0.25), per)
    transient = np.zeros(m)
    for start, d in plan:
        amp = rng.uniform(1.0, 1.5)
        onset = start - cfg.lead
        stop = start + d
        rise = 1.0 - np.exp(-np.maximum(u - onset, 0.0) / 1.5)
        fall = np.exp(-np.maximum(u - stop, 0.0) / 5.0)
        transient += amp * rise * fall
    gsr = 4.0 + drift + wobble + cfg.coupling * transient + rng.normal(0.0, cfg.noise_sd, m)
    gsr_times = t0 + np.arange(m, dtype=np.int64) * 60

    return SubjectRecord(
        f"syn{index:02d}",
        Channel(g_times, glucose),
        Channel(gsr_times, np.round(gsr, 6)),
        SourceTag.SYNTHETIC,
    )


def generate_synthetic_cohort(cfg: SynthConfig) -> Cohort:
    """Seeded synthetic cohort whose hypoglycemic fraction hits the target.

    Each subject is generated from its own seed derived from ``cfg.seed``,
    so subjects can be produced in any order or in parallel.
    """
    cfg.validate()
    if cfg.target_prevalence * cfg.steps_per_subject < 1.0:
        raise ConfigError(
            f"prevalence {cfg.target_prevalence} over {cfg.steps_per_subject} steps "
            "expects fewer than one hypoglycemic step per subject"
        )
    return Cohort([_synth_subject(cfg, i) for i in range(cfg.n_subjects)])
