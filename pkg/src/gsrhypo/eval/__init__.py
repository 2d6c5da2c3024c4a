"""Metrics, bootstrap intervals, the experiment matrix and report output."""

from .bootstrap import ConfidenceInterval, bootstrap_all, stratified_bootstrap_ci
from .experiment import EvaluationReport, PreparedData, load_cohort, prepare, run_cell, run_experiment
from .metrics import ConfusionCounts, MetricSet, confusion, metrics_from_confusion, roc_auc, roc_curve
from .report import emit_report, from_json, write_reports

__all__ = [
    "ConfidenceInterval", "ConfusionCounts", "EvaluationReport", "MetricSet", "PreparedData",
    "bootstrap_all", "confusion", "emit_report", "from_json", "load_cohort", "metrics_from_confusion",
    "prepare", "roc_auc", "roc_curve", "run_cell", "run_experiment", "stratified_bootstrap_ci",
    "write_reports",
]
