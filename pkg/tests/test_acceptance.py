"""The acceptance suite. Each test carries a ``criterion`` marker, and the
terminal summary prints one PASS/FAIL line per criterion."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from gsrhypo.config import load_config
from gsrhypo.dsp import butterworth_sos, preprocess_subject, sos_filter
from gsrhypo.eval import load_cohort, prepare, roc_auc, run_cell, run_experiment, stratified_bootstrap_ci
from gsrhypo.ingest import generate_synthetic_cohort
from gsrhypo.models import Family
from gsrhypo.windowing import _blocks, label_array

from gradcheck import check_family


def detail(record_property, text):
    record_property("detail", text)


# -- 1 ----------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_labeling_exactness(record_property):
    rng = np.random.default_rng(1)
    near = np.nextafter(70.0, 0.0), 70.0, np.nextafter(70.0, 200.0)
    ulps = 70.0 + np.arange(-500, 501) * np.spacing(70.0)
    g = np.concatenate([
        rng.uniform(1e-3, 500.0, 600_000),
        rng.uniform(69.0, 71.0, 200_000),
        rng.integers(1, 400, 150_000).astype(float),
        np.round(rng.uniform(60.0, 80.0, 47_998), 1),
        np.tile(ulps, 2)[:1_998],
        np.array(near),
        rng.uniform(1e-300, 1e-3, 1),
    ])
    assert len(g) == 1_000_000
    rng.shuffle(g)
    started = time.perf_counter()
    labels = label_array(g)
    seconds = time.perf_counter() - started
    # for positive doubles the bit patterns sort like the values
    expected = (g.view(np.int64) < np.float64(70.0).view(np.int64)).astype(labels.dtype)
    wrong = int(np.sum(labels != expected))
    detail(record_property, f"{wrong} mislabeled of {len(g)}, {seconds:.3f}s")
    assert wrong == 0
    assert seconds < 1.0


# -- 2 ----------------------------------------------------------------------


def sine_gain_db(sos, f, n=1 << 15):
    """Steady-state single-pass gain at ``f`` by least-squares sine fit."""
    t = np.arange(n)
    y = sos_filter(sos, np.sin(2 * np.pi * f * t))
    tail = slice(n // 2, None)
    design = np.column_stack([np.sin(2 * np.pi * f * t[tail]), np.cos(2 * np.pi * f * t[tail])])
    return 20 * np.log10(np.hypot(*np.linalg.lstsq(design, y[tail], rcond=None)[0]))


@pytest.mark.criterion(2)
def test_filter_attenuation(record_property):
    started = time.perf_counter()
    fc = 0.01
    worst_fc, worst_probe = 0.0, 0.0
    for order in (2, 4):
        for cutoff in (fc, 0.1):
            worst_fc = max(worst_fc, abs(sine_gain_db(butterworth_sos(order, cutoff), cutoff) + 3.01))
        sos = butterworth_sos(order, fc)
        for ratio in (0.25, 0.5, 0.75, 1.5, 2.0):
            analytic = -10 * np.log10(1 + ratio ** (2 * order))
            worst_probe = max(worst_probe, abs(sine_gain_db(sos, ratio * fc) - analytic))
    seconds = time.perf_counter() - started
    detail(record_property, f"cutoff err {worst_fc:.4f} dB, probe err {worst_probe:.4f} dB, {seconds:.2f}s")
    assert worst_fc <= 0.1
    assert worst_probe <= 0.5
    assert seconds < 5.0


# -- 3 ----------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_normalization_postconditions(record_property):
    cfg = load_config()
    worst_mean, worst_sd = 0.0, 0.0
    for rec in generate_synthetic_cohort(cfg.synth).subjects:
        z = preprocess_subject(rec, cfg.filter, cfg.max_gap, cfg.iqr_k).gsr
        z = z[~np.isnan(z)]
        worst_mean = max(worst_mean, abs(z.mean()))
        worst_sd = max(worst_sd, abs(z.std() - 1.0))
    detail(record_property, f"max |mean| {worst_mean:.2e}, max |sd-1| {worst_sd:.2e}")
    assert worst_mean < 1e-9
    assert worst_sd < 1e-6


# -- 4 ----------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_split_integrity(record_property):
    worst_pp = 0.0
    for seed in range(20):
        cfg = load_config(None, {"seed": seed})
        data = prepare(load_cohort(cfg), cfg)
        ws, sp = data.windows, data.split
        parts = sp.parts()
        idx = [set(p.tolist()) for p in parts.values()]
        assert not (idx[0] & idx[1] or idx[0] & idx[2] or idx[1] & idx[2])
        assert idx[0] | idx[1] | idx[2] | set(sp.dropped.tolist()) == set(range(len(ws)))
        grids = [{(str(ws.subject_ids[i]), int(ws.start_index[i]) + k) for i in p for k in range(ws.width)}
                 for p in parts.values()]
        assert not (grids[0] & grids[1] or grids[0] & grids[2] or grids[1] & grids[2])
        prevalence = ws.labels.mean()
        for p in parts.values():
            worst_pp = max(worst_pp, 100 * abs(ws.labels[p].mean() - prevalence))
        # whole blocks are assigned, then guard windows are dropped
        block = max(len(b) for b in _blocks(ws, ws.width, cfg.block_len))
        for f, p in zip(cfg.fractions, parts.values()):
            target = f * len(ws)
            assert target - block - len(sp.dropped) <= len(p) <= target + block
    detail(record_property, f"20 seeds, max prevalence gap {worst_pp:.3f} pp")
    assert worst_pp <= 1.0


# -- 5 ----------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_gradient_oracle(record_property):
    started = time.perf_counter()
    worst = {}
    for family in (Family.MLP, Family.CNN, Family.LSTM, Family.LR):
        worst[family.value] = max(max(check_family(family, seed).values()) for seed in range(5))
    seconds = time.perf_counter() - started
    detail(record_property, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {seconds:.1f}s")
    assert max(worst.values()) < 1e-4
    assert seconds < 60.0


# -- 6 ----------------------------------------------------------------------


def pair_count_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (wins + ties / 2) / (len(pos) * len(neg))


@pytest.mark.criterion(6)
def test_auc_oracle(record_property):
    rng = np.random.default_rng(6)
    mismatches = tie_heavy = 0
    for i in range(500):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        if i % 2 == 0:
            s = rng.integers(0, int(rng.integers(1, 6)), n).astype(float)
            tie_heavy += 1
        else:
            s = rng.normal(size=n) + 0.7 * y
        mismatches += roc_auc(s, y) != pair_count_auc(s, y)
    detail(record_property, f"{mismatches} mismatches in 500 instances ({tie_heavy} tie-heavy)")
    assert mismatches == 0


# -- 7 ----------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_bootstrap_coverage(record_property):
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    covered = 0
    for trial in range(200):
        y = (rng.random(1000) < 0.3).astype(np.int64)
        correct = rng.random(1000) < 0.8
        pred = np.where(correct, y, 1 - y)
        ci = stratified_bootstrap_ci(pred.astype(float), pred, y, "accuracy", iterations=1000, seed=trial)
        covered += ci.low <= 0.8 <= ci.high
    again = [stratified_bootstrap_ci(pred.astype(float), pred, y, "accuracy", iterations=1000, seed=3)
             for _ in range(2)]
    seconds = time.perf_counter() - started
    detail(record_property, f"coverage {covered}/200, {seconds:.1f}s")
    assert again[0] == again[1]
    assert covered >= 180
    assert seconds < 120.0


# -- 8 to 11 ----------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_sequence_beats_static(record_property):
    cfg = load_config(None, {"data.synth.coupling": 0.9, "models.families": ["cnn", "lstm"]})
    report = run_experiment(load_cohort(cfg), cfg)
    gaps = {}
    for family in ("cnn", "lstm"):
        seq, stat = report.row(family, "sequence"), report.row(family, "static")
        assert seq["status"] == stat["status"] == "ok"
        gaps[family] = seq["test"]["auc"] - stat["test"]["auc"]
    detail(record_property, ", ".join(f"{k} AUC gain {v:.3f}" for k, v in gaps.items()))
    assert min(gaps.values()) >= 0.05


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_imbalance_mechanics(record_property):
    cfg = load_config()
    data = prepare(load_cohort(cfg), cfg)
    weighted = run_cell("lstm", "sequence", data, cfg)
    plain = run_cell("lstm", "sequence", data, cfg, use_class_weights=False, balanced_batches=False)
    assert weighted.row["status"] == plain.row["status"] == "ok"
    rw, rp = weighted.row["test"]["hypo"]["recall"], plain.row["test"]["hypo"]["recall"]
    detail(record_property, f"weighted recall {rw:.3f}, unweighted {rp:.3f}")
    assert rw >= 0.5
    assert rp < rw


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_no_signal_control(record_property):
    cfg = load_config(None, {"data.synth.coupling": 0.0})
    report = run_experiment(load_cohort(cfg), cfg)
    assert len(report.rows) == 14
    missing = [f"{r['family']}/{r['feature_mode']}" for r in report.rows
               if r["status"] != "ok" or not r["ci"]["auc"]["low"] <= 0.5 <= r["ci"]["auc"]["high"]]
    detail(record_property, f"{14 - len(missing)}/14 AUC CIs contain 0.5")
    assert not missing, missing


def cli_evaluate(out):
    started = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "gsrhypo", "evaluate", "--synthetic", "--seed", "7",
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr[-2000:]
    return time.perf_counter() - started


@pytest.mark.slow
@pytest.mark.criterion(11)
def test_end_to_end_determinism(tmp_path, record_property):
    seconds = [cli_evaluate(tmp_path / "a"), cli_evaluate(tmp_path / "b")]
    a, b = tmp_path / "a", tmp_path / "b"
    names = sorted(p.name for p in a.glob("report.*")) + sorted(p.name for p in a.glob("roc_*.csv"))
    assert "report.json" in names and len(names) > 14
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    models = sorted(p.name for p in (a / "models").iterdir())
    differ += [n for n in models if (a / "models" / n).read_bytes() != (b / "models" / n).read_bytes()]
    rows = json.loads((a / "report.json").read_text())
    detail(record_property, f"{rows['dataset']['n_windows']} windows, runs {seconds[0]:.0f}s and "
                            f"{seconds[1]:.0f}s, {len(names) + len(models)} files compared, {len(differ)} differ")
    assert len(rows["models"]) == 14
    assert not differ, differ
    assert max(seconds) < 600
