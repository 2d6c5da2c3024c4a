"""Report serialization: canonical JSON, flat CSV, markdown tables and ROC
point files."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any

from ..errors import EmptyReportError, ParseError
from .experiment import EvaluationReport, cell_name

FORMATS = ("json", "csv", "markdown")
MODEL_LABELS = {"lr": "Logistic Regression", "knn": "KNN", "rf": "Random Forest", "gbdt": "XGBoost-style GBDT",
                "mlp": "MLP", "cnn": "CNN", "lstm": "LSTM"}

CSV_COLUMNS = [
    "family", "feature_mode", "status", "split", "n", "n_hypo", "accuracy", "auc",
    "hypo_precision", "hypo_recall", "hypo_f1", "normo_precision", "normo_recall", "normo_f1",
    "tp", "fp", "fn", "tn",
    "ci_accuracy_low", "ci_accuracy_high", "ci_auc_low", "ci_auc_high",
    "ci_hypo_recall_low", "ci_hypo_recall_high", "ci_hypo_f1_low", "ci_hypo_f1_high",
    "ci_hypo_precision_low", "ci_hypo_precision_high",
    "ci_normo_recall_low", "ci_normo_recall_high", "ci_normo_f1_low", "ci_normo_f1_high",
    "ci_normo_precision_low", "ci_normo_precision_high", "error",
]


def _check(report: EvaluationReport):
    if report is None or not report.rows:
        raise EmptyReportError("report has no model rows")


def to_json(report: EvaluationReport) -> bytes:
    _check(report)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False, ensure_ascii=True)
    return (text + "\n").encode()


def from_json(data: bytes | str) -> EvaluationReport:
    try:
        d = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"report is not valid JSON: {exc}") from exc
    if not isinstance(d, dict) or "models" not in d:
        raise ParseError("report JSON lacks a models list")
    return EvaluationReport.from_dict(d)


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_rows(report: EvaluationReport):
    for r in report.rows:
        base = {"family": r["family"], "feature_mode": r["feature_mode"], "status": r["status"],
                "error": r.get("error") or ""}
        if r["status"] != "ok":
            yield {**base, "split": "test"}
            continue
        for split in ("test", "val"):
            s = r[split]
            row = {**base, "split": split, "n": s["n"], "n_hypo": s["n_hypo"], "accuracy": s["accuracy"],
                   "auc": s["auc"], **s["confusion"]}
            for cls in ("hypo", "normo"):
                for m in ("precision", "recall", "f1"):
                    row[f"{cls}_{m}"] = s[cls][m]
            if split == "test":
                ci = r["ci"]
                for key, c in (("accuracy", ci["accuracy"]), ("auc", ci["auc"])):
                    row[f"ci_{key}_low"] = c and c["low"]
                    row[f"ci_{key}_high"] = c and c["high"]
                for cls in ("hypo", "normo"):
                    for m in ("precision", "recall", "f1"):
                        c = ci[cls][m]
                        row[f"ci_{cls}_{m}_low"] = c and c["low"]
                        row[f"ci_{cls}_{m}_high"] = c and c["high"]
            yield row


def to_csv(report: EvaluationReport) -> bytes:
    _check(report)
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in _csv_rows(report):
        w.writerow({k: _fmt(row.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue().encode()


def _num(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def _with_ci(v, ci) -> str:
    if ci is None:
        return _num(v)
    return f"{_num(v)} [{ci['low']:.3f}, {ci['high']:.3f}]"


def _label(r) -> str:
    return f"{MODEL_LABELS.get(r['family'], r['family'])} ({r['feature_mode']})"


def to_markdown(report: EvaluationReport) -> bytes:
    _check(report)
    ds = report.dataset
    lines = [
        "# Glycemic state classification report",
        "",
        f"Master seed {report.seed}. {ds.get('n_windows', 0)} windows from {ds.get('n_subjects', 0)} subjects, "
        f"Hypo prevalence {100 * ds.get('prevalence', 0.0):.2f}%. Test-set metrics, 95% stratified bootstrap "
        "intervals in brackets.",
        "",
        "## Hypoglycemia (positive class)",
        "",
        "Model | Accuracy | Recall | F1-score | AUC",
        "--- | --- | --- | --- | ---",
    ]
    for r in report.rows:
        if r["status"] != "ok":
            lines.append(f"{_label(r)} | failed | failed | failed | failed")
            continue
        t, ci = r["test"], r["ci"]
        lines.append(" | ".join([
            _label(r), _with_ci(t["accuracy"], ci["accuracy"]), _with_ci(t["hypo"]["recall"], ci["hypo"]["recall"]),
            _with_ci(t["hypo"]["f1"], ci["hypo"]["f1"]), _with_ci(t["auc"], ci["auc"])]))
    lines += ["", "## Normoglycemia", "", "Model | Recall | F1-score | AUC", "--- | --- | --- | ---"]
    for r in report.rows:
        if r["status"] != "ok":
            lines.append(f"{_label(r)} | failed | failed | failed")
            continue
        t, ci = r["test"], r["ci"]
        lines.append(" | ".join([
            _label(r), _with_ci(t["normo"]["recall"], ci["normo"]["recall"]),
            _with_ci(t["normo"]["f1"], ci["normo"]["f1"]), _with_ci(t["auc"], ci["auc"])]))
    lines += ["", "## Validation set", "", "Model | Accuracy | Hypo recall | Hypo F1-score | AUC",
              "--- | --- | --- | --- | ---"]
    for r in report.rows:
        if r["status"] != "ok":
            lines.append(f"{_label(r)} | failed | failed | failed | failed")
            continue
        v = r["val"]
        lines.append(" | ".join([_label(r), _num(v["accuracy"]), _num(v["hypo"]["recall"]),
                                 _num(v["hypo"]["f1"]), _num(v["auc"])]))
    failed = [r for r in report.rows if r["status"] != "ok"]
    if failed:
        lines += ["", "## Failed models", ""]
        lines += [f"- {_label(r)}: {r['error']}" for r in failed]
    return ("\n".join(lines) + "\n").encode()


def emit_report(report: EvaluationReport, fmt: str) -> bytes:
    fmt = fmt.lower()
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        return to_csv(report)
    if fmt in ("markdown", "md"):
        return to_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")


def roc_csv(fpr, tpr, thr) -> bytes:
    buf = io.StringIO()
    buf.write("fpr,tpr,threshold\n")
    for a, b, c in zip(fpr, tpr, thr):
        buf.write(f"{float(a)!r},{float(b)!r},{'inf' if c == float('inf') else repr(float(c))}\n")
    return buf.getvalue().encode()


def write_reports(report: EvaluationReport, out_dir: str | Path, formats=FORMATS) -> list[Path]:
    """``report.json`` / ``report.csv`` / ``report.md`` plus one
    ``roc_<family>_<mode>.csv`` per scored model."""
    _check(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {"json": "report.json", "csv": "report.csv", "markdown": "report.md"}
    written = []
    for fmt in formats:
        p = out / names[fmt]
        p.write_bytes(emit_report(report, fmt))
        written.append(p)
    for r in report.rows:
        name = cell_name(r["family"], r["feature_mode"])
        if name in report.roc:
            p = out / f"roc_{name}.csv"
            p.write_bytes(roc_csv(*report.roc[name]))
            written.append(p)
    return written
