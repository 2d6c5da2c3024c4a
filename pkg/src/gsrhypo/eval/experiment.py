"""The experiment matrix: preprocess, window, split, then fit and score
every requested family in every requested feature mode."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..config import RunConfig
from ..dsp import preprocess_subject
from ..errors import ConfigError, GsrHypoError, with_subject
from ..ingest import (
    CANONICAL_SCHEMA,
    Cohort,
    SourceTag,
    generate_synthetic_cohort,
    merge_cohorts,
    parse_subject_csv,
    parse_subject_xml,
)
from ..models import Family, FeatureMode, TrainedModel, features_for, fit_model, predict_scores
from ..seeds import derive_seed
from ..windowing import SplitAssignment, WindowSet, class_weights, make_windows, stratified_split
from .bootstrap import bootstrap_all
from .metrics import confusion, metrics_from_confusion, roc_auc, roc_curve

log = logging.getLogger("gsrhypo.eval")

REPORT_SCHEMA = 1


# --------------------------------------------------------------------------
# data preparation


def _source_tag(path: Path) -> SourceTag:
    text = str(path)
    if "2020" in text:
        return SourceTag.OHIO2020
    if "2018" in text:
        return SourceTag.OHIO2018
    return SourceTag.SYNTHETIC


def read_subject_file(path: str | Path):
    """Parse one subject file; XML by default, CSV for ``.csv`` names."""
    path = Path(path)
    sid = path.stem.split("-")[0]
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        if path.suffix.lower() == ".csv":
            return parse_subject_csv(data, CANONICAL_SCHEMA, sid, _source_tag(path))
        return parse_subject_xml(data, sid, _source_tag(path))
    except GsrHypoError as exc:
        raise with_subject(exc, f"{sid} ({path.name})") from exc


def load_cohort(cfg: RunConfig) -> Cohort:
    """The synthetic cohort, or the files in ``cfg.paths`` grouped by
    source release and merged."""
    if cfg.synthetic:
        return generate_synthetic_cohort(cfg.synth)
    by_tag: dict[SourceTag, Cohort] = {}
    for p in cfg.paths:
        rec = read_subject_file(p)
        cohort = by_tag.setdefault(rec.source_tag, Cohort())
        if rec.subject_id in cohort.ids:
            raise ConfigError(f"subject {rec.subject_id} appears twice in release {rec.source_tag.value}")
        cohort.subjects.append(rec)
    merged = Cohort()
    for tag in sorted(by_tag, key=lambda t: t.value):
        merged = merge_cohorts(merged, by_tag[tag])
    return merged


@dataclass
class PreparedData:
    windows: WindowSet
    split: SplitAssignment
    subject_ids: list[str]

    def part(self, name: str) -> WindowSet:
        return self.windows.take(getattr(self.split, name))


def build_windows(cohort: Cohort, cfg: RunConfig) -> WindowSet:
    parts = []
    for rec in cohort.subjects:
        series = preprocess_subject(rec, cfg.filter, cfg.max_gap, cfg.iqr_k)
        parts.append(make_windows(series, cfg.width, cfg.stride))
    return WindowSet.concat(parts) if parts else WindowSet.empty(cfg.width)


def split_windows(ws: WindowSet, cfg: RunConfig) -> SplitAssignment:
    return stratified_split(ws, cfg.fractions, derive_seed(cfg.seed, "split"), cfg.width, cfg.block_len)


def prepare(cohort: Cohort, cfg: RunConfig) -> PreparedData:
    ws = build_windows(cohort, cfg)
    return PreparedData(ws, split_windows(ws, cfg), cohort.ids)


def windows_digest(ws: WindowSet) -> str:
    h = hashlib.sha256()
    h.update("\n".join(map(str, ws.subject_ids)).encode())
    for arr in (ws.start_index.astype("<i8"), ws.gsr.astype("<f8"), ws.labels.astype("<i8")):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def dataset_summary(data: PreparedData) -> dict[str, Any]:
    ws, sp = data.windows, data.split
    splits = {}
    for name, idx in sp.parts().items():
        sids, counts = np.unique(ws.subject_ids[idx], return_counts=True)
        n_hypo = int(ws.labels[idx].sum())
        splits[name] = {
            "n": int(len(idx)),
            "n_hypo": n_hypo,
            "prevalence": n_hypo / len(idx) if len(idx) else 0.0,
            "subjects": {str(s): int(c) for s, c in zip(sids, counts)},
        }
    return {
        "digest": windows_digest(ws),
        "n_windows": len(ws),
        "n_hypo": int(ws.labels.sum()),
        "prevalence": float(ws.labels.mean()) if len(ws) else 0.0,
        "n_subjects": len(data.subject_ids),
        "dropped_guard_windows": int(len(sp.dropped)),
        "split_seed": sp.seed,
        "splits": splits,
    }


# --------------------------------------------------------------------------
# scoring


def _finite(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def score_split(scores: np.ndarray, labels: np.ndarray, threshold: float) -> dict[str, Any]:
    preds = (scores >= threshold).astype(np.int64)
    c = confusion(preds, labels)
    try:
        auc = roc_auc(scores, labels)
    except GsrHypoError:
        auc = float("nan")
    hypo = metrics_from_confusion(c, auc)
    normo = metrics_from_confusion(c.flipped(), auc)
    per_class = lambda m: {"precision": m.precision, "recall": m.recall, "f1": m.f1,
                           "undefined": list(m.undefined)}
    return {
        "n": c.total,
        "n_hypo": c.tp + c.fn,
        "confusion": {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn},
        "accuracy": hypo.accuracy,
        "auc": _finite(auc),
        "hypo": per_class(hypo),
        "normo": per_class(normo),
    }


def _ci_block(scores, labels, threshold, iterations, level, seed) -> dict[str, Any]:
    preds = (scores >= threshold).astype(np.int64)
    cis = bootstrap_all(scores, preds, labels, iterations, level, seed)
    d = lambda ci: ci.as_dict() if ci is not None else None
    return {
        "accuracy": d(cis["hypo"]["accuracy"]),
        "auc": d(cis["hypo"]["auc"]),
        "hypo": {m: d(cis["hypo"][m]) for m in ("precision", "recall", "f1")},
        "normo": {m: d(cis["normo"][m]) for m in ("precision", "recall", "f1")},
    }


_META_KEYS = ("epochs_run", "best_epoch", "best_val_loss", "rounds_run", "best_round", "steps",
              "grad_norm", "n_trees", "k", "scale_pos_weight")


def _training_summary(model: TrainedModel) -> dict[str, Any]:
    out = {k: model.meta[k] for k in _META_KEYS if k in model.meta}
    return {k: (_finite(v) if isinstance(v, float) else v) for k, v in out.items()}


@dataclass
class CellResult:
    row: dict[str, Any]
    model: TrainedModel | None = None
    roc: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    seconds: float = 0.0


def run_cell(family: str, mode: str, data: PreparedData, cfg: RunConfig,
             train: WindowSet | None = None, val: WindowSet | None = None,
             test: WindowSet | None = None, **train_overrides) -> CellResult:
    """Fit one family in one feature mode and score it on val and test."""
    family, mode = Family(family), FeatureMode(mode)
    train = data.part("train") if train is None else train
    val = data.part("val") if val is None else val
    test = data.part("test") if test is None else test
    started = time.perf_counter()
    row: dict[str, Any] = {"family": family.value, "feature_mode": mode.value}
    try:
        tc = cfg.train_config(
            family,
            seed=derive_seed(cfg.seed, "model", family.value, mode.value),
            class_weights=class_weights(train.labels),
            **train_overrides,
        )
        model = fit_model(family, train, val, mode, tc)
        yv, yt = val.labels.astype(np.int64), test.labels.astype(np.int64)
        sv = predict_scores(model, features_for(family, val, mode))
        st = predict_scores(model, features_for(family, test, mode))
        row.update(
            status="ok",
            error=None,
            seed=tc.seed,
            threshold=tc.threshold,
            val=score_split(sv, yv, tc.threshold),
            test=score_split(st, yt, tc.threshold),
            ci=_ci_block(st, yt, tc.threshold, cfg.bootstrap_iterations, cfg.ci_level,
                         derive_seed(cfg.seed, "bootstrap", family.value, mode.value)),
            training=_training_summary(model),
        )
        roc = roc_curve(st, yt)
    except Exception as exc:  # one broken family must not sink the matrix
        log.warning("%s/%s failed: %s: %s", family.value, mode.value, type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return CellResult(row, seconds=time.perf_counter() - started)
    return CellResult(row, model, roc, time.perf_counter() - started)


# --------------------------------------------------------------------------
# the matrix


@dataclass
class EvaluationReport:
    """Canonical content lives in :meth:`to_dict`; ROC points and timings
    ride along for the sidecar files but are not part of it."""

    seed: int
    config: dict[str, Any]
    dataset: dict[str, Any]
    rows: list[dict[str, Any]]
    roc: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"schema": REPORT_SCHEMA, "seed": self.seed, "config": self.config,
                "dataset": self.dataset, "models": self.rows}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvaluationReport":
        return cls(d["seed"], d["config"], d["dataset"], list(d["models"]))

    def row(self, family: str, mode: str) -> dict[str, Any]:
        for r in self.rows:
            if r["family"] == family and r["feature_mode"] == mode:
                return r
        raise KeyError(f"{family}/{mode} not in report")


def cell_name(family: str, mode: str) -> str:
    return f"{family}_{mode}"


def run_experiment(cohort: Cohort | PreparedData, cfg: RunConfig,
                   on_model: Callable[[str, str, TrainedModel], None] | None = None) -> EvaluationReport:
    """Every requested family in every requested feature mode, sorted by
    family name then mode. ``on_model`` receives each fitted model."""
    data = cohort if isinstance(cohort, PreparedData) else prepare(cohort, cfg)
    train, val, test = data.part("train"), data.part("val"), data.part("test")
    log.info("windows: %d (hypo %.2f%%); train %d, val %d, test %d, guard-dropped %d",
             len(data.windows), 100 * data.windows.labels.mean(), len(train), len(val), len(test),
             len(data.split.dropped))
    rows, roc, timings = [], {}, {}
    for family in sorted(cfg.families):
        for mode in sorted(cfg.feature_modes, key=lambda m: list(FeatureMode).index(FeatureMode(m))):
            name = cell_name(family, mode)
            res = run_cell(family, mode, data, cfg, train, val, test)
            rows.append(res.row)
            timings[name] = res.seconds
            if res.roc is not None:
                roc[name] = res.roc
            if res.model is not None and on_model is not None:
                on_model(family, mode, res.model)
            if res.row["status"] == "ok":
                log.info("%s: test AUC %.3f, hypo recall %.3f, F1 %.3f (%.1fs)", name,
                         res.row["test"]["auc"] or float("nan"), res.row["test"]["hypo"]["recall"],
                         res.row["test"]["hypo"]["f1"], res.seconds)
    # where the files land does not change what they say
    config = {k: v for k, v in cfg.resolved().items() if k != "output"}
    return EvaluationReport(cfg.seed, config, dataset_summary(data), rows, roc, timings)
