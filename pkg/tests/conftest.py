import numpy as np
import pytest

from gsrhypo.config import load_config
from gsrhypo.dsp import Stage, UniformSeries
from gsrhypo.eval.experiment import prepare
from gsrhypo.ingest import SynthConfig, generate_synthetic_cohort
from gsrhypo.windowing import WindowSet


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(SynthConfig(n_subjects=3, steps_per_subject=1500, seed=11))


@pytest.fixture(scope="session")
def small_config():
    return load_config(None, {
        "seed": 11,
        "data.synth.n_subjects": 4,
        "data.synth.steps_per_subject": 1500,
        "eval.bootstrap_iterations": 200,
        "models.train.max_epochs": 3,
        "models.train.n_trees": 10,
        "models.train.gbdt_rounds": 20,
    })


@pytest.fixture(scope="session")
def small_prepared(small_config):
    return prepare(generate_synthetic_cohort(small_config.synth), small_config)


def standardized(gsr, glucose=None, sid="s"):
    gsr = np.asarray(gsr, dtype=float)
    glucose = np.full(len(gsr), 120.0) if glucose is None else np.asarray(glucose, dtype=float)
    return UniformSeries(sid, 0, glucose, gsr, Stage.STANDARDIZED)


def window_set(labels, width=12, seed=0, sid="s", signal=0.0):
    """Windows with increasing start indices on one subject; Hypo windows
    have their GSR shifted by ``signal``."""
    rng = np.random.default_rng(seed)
    y = np.asarray(labels, dtype=np.int8)
    gsr = rng.normal(size=(len(y), width)) + signal * y[:, None]
    return WindowSet(np.full(len(y), sid), np.arange(len(y), dtype=np.int64), gsr,
                     np.where(y == 1, 60.0, 120.0), y)


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number = marker.args[0]
    if rep.failed or rep.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}".rstrip())
