import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from gsrhypo.errors import EmptyReportError, InsufficientClassError, ShapeError, UnstableMetricError
from gsrhypo.eval import (
    ConfusionCounts,
    EvaluationReport,
    confusion,
    emit_report,
    from_json,
    metrics_from_confusion,
    roc_auc,
    roc_curve,
    run_experiment,
    stratified_bootstrap_ci,
    write_reports,
)
from gsrhypo.eval.bootstrap import bootstrap_replicates, percentile_ci
from gsrhypo.eval.experiment import score_split
from gsrhypo.eval.metrics import roc_auc_bruteforce
from gsrhypo.eval.report import to_csv

# -- confusion and metrics --------------------------------------------------


def test_confusion_examples():
    y = [1, 1, 1] + [0] * 7
    assert confusion(y, y) == ConfusionCounts(3, 0, 0, 7)
    assert confusion([0] * 10, y) == ConfusionCounts(0, 0, 3, 7)


def test_confusion_hand_tally():
    preds = [1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 1, 0]
    labels = [1, 1, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0]
    tally = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for p, y in zip(preds, labels):
        tally[{(1, 1): "tp", (1, 0): "fp", (0, 1): "fn", (0, 0): "tn"}[(p, y)]] += 1
    assert confusion(preds, labels) == ConfusionCounts(**tally)


def test_confusion_length_mismatch():
    with pytest.raises(ShapeError):
        confusion([1, 0], [1])


def test_metrics_example():
    m = metrics_from_confusion(ConfusionCounts(5, 3, 2, 90))
    assert m.precision == 0.625
    assert abs(m.recall - 0.714286) < 1e-6
    assert abs(m.f1 - 0.666667) < 1e-6
    assert m.accuracy == 0.95


def test_metrics_degenerate_flagged():
    m = metrics_from_confusion(ConfusionCounts(0, 0, 3, 7))
    assert (m.recall, m.precision, m.f1) == (0.0, 0.0, 0.0)
    assert "precision" in m.undefined and "recall" not in m.undefined


def test_metrics_perfect():
    m = metrics_from_confusion(ConfusionCounts(4, 0, 0, 6), 1.0)
    assert (m.accuracy, m.precision, m.recall, m.f1, m.auc) == (1.0,) * 5


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn, tn):
    c = ConfusionCounts(tp, fp, fn, tn)
    if c.total == 0:
        return
    m = metrics_from_confusion(c)
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 1.0
    if m.precision + m.recall > 0:
        assert math.isclose(m.f1, 2 * m.precision * m.recall / (m.precision + m.recall))


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_accuracy_decomposition(pairs):
    p, y = np.array(pairs).T
    c = confusion(p, y)
    hypo, normo = metrics_from_confusion(c), metrics_from_confusion(c.flipped())
    n_h, n_n = int(y.sum()), int(len(y) - y.sum())
    assert math.isclose(hypo.accuracy, (hypo.recall * n_h + normo.recall * n_n) / len(y), abs_tol=1e-12)


# -- AUC --------------------------------------------------------------------


def test_auc_example():
    assert roc_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75


def test_auc_separated_and_tied():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class():
    with pytest.raises(InsufficientClassError):
        roc_auc([0.1, 0.2], [1, 1])


labeled_scores = st.integers(2, 200).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.one_of(st.integers(0, 5).map(float), st.floats(0, 1)), min_size=n, max_size=n),
))


@settings(max_examples=300, deadline=None)
@given(labeled_scores)
def test_auc_equals_bruteforce_exactly(case):
    y, s = case
    if len(set(y)) < 2:
        return
    assert roc_auc(s, y) == roc_auc_bruteforce(s, y)


@settings(max_examples=200, deadline=None)
@given(labeled_scores)
def test_auc_complement_symmetry(case):
    y, s = case
    if len(set(y)) < 2:
        return
    flipped = [1 - v for v in y]
    assert abs(roc_auc(s, y) + roc_auc(s, flipped) - 1.0) < 1e-12


def test_roc_curve_area_matches_auc():
    rng = np.random.default_rng(0)
    y = (rng.random(300) < 0.3).astype(int)
    s = np.round(rng.random(300) + 0.4 * y, 2)
    fpr, tpr, thr = roc_curve(s, y)
    assert (fpr[0], tpr[0], thr[0]) == (0.0, 0.0, np.inf)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert math.isclose(trapezoid(tpr, fpr), roc_auc(s, y), rel_tol=1e-12)


# -- bootstrap --------------------------------------------------------------


def bernoulli_case(n, seed, p_correct=0.8, prevalence=0.3):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < prevalence).astype(int)
    correct = rng.random(n) < p_correct
    preds = np.where(correct, y, 1 - y)
    scores = np.clip(0.5 * preds + 0.5 * rng.random(n), 0, 1)
    return scores, preds, y


def test_perfect_accuracy_ci_is_point():
    y = np.r_[np.ones(20), np.zeros(80)].astype(int)
    ci = stratified_bootstrap_ci(y.astype(float), y, y, "accuracy", iterations=200, seed=1)
    assert (ci.low, ci.high, ci.width) == (1.0, 1.0, 0.0)


def test_bootstrap_deterministic():
    s, p, y = bernoulli_case(500, 3)
    a = stratified_bootstrap_ci(s, p, y, "f1", iterations=300, seed=9)
    b = stratified_bootstrap_ci(s, p, y, "f1", iterations=300, seed=9)
    assert a == b


def test_bootstrap_width_shrinks_with_n():
    widths = [stratified_bootstrap_ci(*bernoulli_case(n, 5), "accuracy", iterations=500, seed=2).width
              for n in (250, 4000)]
    assert widths[1] < widths[0]


def test_bootstrap_preserves_class_counts_and_replays_auc():
    s, p, y = bernoulli_case(60, 7)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    reps = bootstrap_replicates(s, p, y, iterations=20, seed=4)
    rng = np.random.default_rng(4)
    cp = rng.multinomial(len(pos), np.full(len(pos), 1 / len(pos)), size=20)
    cn = rng.multinomial(len(neg), np.full(len(neg), 1 / len(neg)), size=20)
    for i in range(20):
        idx = np.r_[np.repeat(pos, cp[i]), np.repeat(neg, cn[i])]
        assert (y[idx] == 1).sum() == len(pos)
        ys, ss, ps = y[idx], s[idx], p[idx]
        assert math.isclose(reps[("hypo", "auc")][0][i], roc_auc_bruteforce(ss, ys), rel_tol=1e-12)
        c = confusion(ps, ys)
        m = metrics_from_confusion(c)
        assert math.isclose(reps[("hypo", "accuracy")][0][i], m.accuracy, rel_tol=1e-12)
        assert math.isclose(reps[("hypo", "f1")][0][i], m.f1, rel_tol=1e-12)
        assert math.isclose(reps[("normo", "recall")][0][i], metrics_from_confusion(c.flipped()).recall)


def test_undefined_iterations_counted_and_excluded():
    values = np.r_[np.linspace(0, 1, 60), np.zeros(40)]
    undefined = np.r_[np.zeros(60, bool), np.ones(40, bool)]
    ci = percentile_ci(values, undefined)
    assert ci.undefined_iterations == 40
    assert math.isclose(ci.low, np.percentile(values[:60], 2.5), rel_tol=1e-12)
    with pytest.raises(UnstableMetricError):
        percentile_ci(values, ~undefined)


def test_precision_never_defined_is_unstable():
    y = np.r_[np.ones(10), np.zeros(30)].astype(int)
    with pytest.raises(UnstableMetricError):
        stratified_bootstrap_ci(np.zeros(40), np.zeros(40, int), y, "precision", iterations=50)


# -- reports ----------------------------------------------------------------


@pytest.fixture(scope="module")
def report(small_prepared, small_config):
    import dataclasses
    cfg = dataclasses.replace(small_config, families=("lr", "knn"))
    return run_experiment(small_prepared, cfg)


def test_report_shape(report):
    assert [(r["family"], r["feature_mode"]) for r in report.rows] == [
        ("knn", "sequence"), ("knn", "static"), ("lr", "sequence"), ("lr", "static")]
    for r in report.rows:
        assert r["status"] == "ok"
        for cls in ("hypo", "normo"):
            assert set(r["test"][cls]) >= {"precision", "recall", "f1"}
            assert set(r["ci"][cls]) == {"precision", "recall", "f1"}
        assert 0.0 <= r["ci"]["auc"]["low"] <= r["ci"]["auc"]["high"] <= 1.0
        assert r["ci"]["accuracy"]["iterations"] == 200


def test_score_split_matches_metrics():
    s = np.array([0.9, 0.2, 0.6, 0.4, 0.7])
    y = np.array([1, 0, 0, 1, 1])
    out = score_split(s, y, 0.5)
    assert out["confusion"] == {"tp": 2, "fp": 1, "fn": 1, "tn": 1}
    assert out["auc"] == roc_auc(s, y)
    assert out["normo"]["recall"] == 0.5


def test_json_round_trip_is_byte_identical(report):
    first = emit_report(report, "json")
    assert emit_report(from_json(first), "json") == first
    assert json.loads(first)["models"] == report.rows


def test_csv_round_trips_canonical_fields(report):
    import csv
    import io
    rows = list(csv.DictReader(io.StringIO(to_csv(report).decode())))
    test_rows = [r for r in rows if r["split"] == "test"]
    for src, row in zip(report.rows, test_rows):
        assert float(row["accuracy"]) == src["test"]["accuracy"]
        assert float(row["hypo_f1"]) == src["test"]["hypo"]["f1"]
        assert float(row["ci_auc_low"]) == src["ci"]["auc"]["low"]
        assert int(row["tp"]) == src["test"]["confusion"]["tp"]


def test_markdown_one_table_per_class(report):
    md = emit_report(report, "markdown").decode()
    assert "Model | Accuracy | Recall | F1-score | AUC" in md
    assert "Model | Recall | F1-score | AUC" in md


def test_failed_row_rendered():
    rows = [{"family": "lstm", "feature_mode": "static", "status": "failed", "error": "NumericalError: boom"}]
    md = emit_report(EvaluationReport(7, {}, {}, rows), "markdown").decode()
    assert "LSTM (static) | failed | failed | failed | failed" in md
    assert "NumericalError: boom" in md
    assert b"failed" in to_csv(EvaluationReport(7, {}, {}, rows))


def test_empty_report():
    with pytest.raises(EmptyReportError):
        emit_report(EvaluationReport(7, {}, {}, []), "json")


def test_write_reports_emits_roc_files(report, tmp_path):
    written = {p.name for p in write_reports(report, tmp_path)}
    assert {"report.json", "report.csv", "report.md", "roc_lr_sequence.csv"} <= written
    header = (tmp_path / "roc_lr_sequence.csv").read_text().splitlines()[:2]
    assert header == ["fpr,tpr,threshold", "0.0,0.0,inf"]


def test_failing_family_does_not_sink_matrix(small_prepared, small_config):
    import dataclasses
    cfg = dataclasses.replace(small_config, families=("knn", "lr"), feature_modes=("static",),
                              train=small_config.train.with_(knn_k=10 ** 7))
    rep = run_experiment(small_prepared, cfg)
    knn, lr = rep.row("knn", "static"), rep.row("lr", "static")
    assert knn["status"] == "failed" and "ConfigError" in knn["error"]
    assert lr["status"] == "ok"
