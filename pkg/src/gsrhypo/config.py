"""Run configuration: documented defaults, YAML loading, validation and
command-line overrides.

The YAML file mirrors :data:`DEFAULTS` section by section; any key may be
omitted. Per-family training overrides live under ``models.overrides``,
for example ``{lstm: {max_epochs: 30}}``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dsp import FilterSpec
from .errors import ConfigError
from .ingest import SynthConfig
from .models.base import Family, FeatureMode, TrainConfig
from .models.persist import config_digest

ALL_FAMILIES = tuple(f.value for f in Family)
ALL_MODES = tuple(m.value for m in FeatureMode)
REPORT_FORMATS = ("json", "csv", "markdown")

_TRAIN_KEYS = tuple(
    f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "class_weights")
)

DEFAULTS: dict[str, Any] = {
    "seed": 7,
    "data": {
        "synthetic": True,
        "paths": [],
        "synth": {
            "n_subjects": 12,
            "steps_per_subject": 4400,
            "target_prevalence": 0.041,
            "coupling": 0.8,
            "noise_sd": 0.15,
            "lead": 2,
        },
    },
    "preprocess": {"filter_order": 2, "filter_cutoff": 0.1, "iqr_k": 1.5, "max_gap": 3},
    "windows": {"width": 12, "stride": 1, "hypo_threshold": 70.0},
    "split": {"fractions": [0.8, 0.1, 0.1], "block_len": 72},
    "models": {
        "families": list(ALL_FAMILIES),
        "feature_modes": list(ALL_MODES),
        "train": {k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
        "overrides": {},
    },
    "eval": {"bootstrap_iterations": 1000, "ci_level": 0.95},
    "output": {"dir": "runs", "formats": list(REPORT_FORMATS)},
}
for _k, _v in DEFAULTS["models"]["train"].items():
    if isinstance(_v, tuple):
        DEFAULTS["models"]["train"][_k] = list(_v)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    synthetic: bool = True
    paths: tuple[str, ...] = ()
    synth: SynthConfig = field(default_factory=SynthConfig)
    filter: FilterSpec = field(default_factory=FilterSpec)
    iqr_k: float = 1.5
    max_gap: int = 3
    width: int = 12
    stride: int = 1
    hypo_threshold: float = 70.0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    block_len: int = 72
    families: tuple[str, ...] = ALL_FAMILIES
    feature_modes: tuple[str, ...] = ALL_MODES
    train: TrainConfig = field(default_factory=TrainConfig)
    overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    bootstrap_iterations: int = 1000
    ci_level: float = 0.95
    out_dir: str = "runs"
    formats: tuple[str, ...] = REPORT_FORMATS
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def train_config(self, family: str | Family, **extra) -> TrainConfig:
        family = Family(family)
        cfg = self.train.with_(**self.overrides.get(family.value, {}))
        return cfg.with_(**extra) if extra else cfg

    def resolved(self) -> dict[str, Any]:
        """Every knob in the pipeline as a nested, JSON-able dict."""
        return copy.deepcopy(self.raw)

    def digest(self) -> str:
        return config_digest(self.raw)

    def data_digest(self) -> str:
        """Digest of the settings that determine preprocessed windows."""
        return config_digest({k: self.raw[k] for k in ("seed", "data", "preprocess", "windows")})


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            valid = ", ".join(sorted(base))
            raise ConfigError(f"unknown config key {where!r}; valid keys here: {valid}")
        if isinstance(base[key], dict) and key != "overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _need(cond: bool, key: str, expected: str, value: Any):
    if not cond:
        raise ConfigError(f"invalid value for {key}: {value!r} (expected {expected})")


def _num(value, key: str) -> float:
    _need(isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value),
          key, "a finite number", value)
    return float(value)


def _int(value, key: str) -> int:
    _need(isinstance(value, int) and not isinstance(value, bool), key, "an integer", value)
    return int(value)


def _bool(value, key: str) -> bool:
    _need(isinstance(value, bool), key, "true or false", value)
    return value


def _train_config(d: dict[str, Any], seed: int, where: str) -> dict[str, Any]:
    out = {}
    defaults = TrainConfig()
    for key, value in d.items():
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown config key {where}.{key!r}; valid keys: {', '.join(_TRAIN_KEYS)}")
        ref = getattr(defaults, key)
        name = f"{where}.{key}"
        if isinstance(ref, bool):
            out[key] = _bool(value, name)
        elif isinstance(ref, int):
            out[key] = _int(value, name)
            _need(out[key] >= 1, name, ">= 1", value)
        elif isinstance(ref, float):
            out[key] = _num(value, name)
        elif isinstance(ref, tuple):
            _need(isinstance(value, (list, tuple)) and len(value) == len(ref)
                  and all(isinstance(v, int) and v >= 1 for v in value),
                  name, f"{len(ref)} positive integers", value)
            out[key] = tuple(value)
    checks = {
        "learning_rate": (lambda v: v > 0, "> 0"),
        "logreg_learning_rate": (lambda v: v > 0, "> 0"),
        "dropout_rate": (lambda v: 0 <= v < 1, "in [0, 1)"),
        "l2_lambda": (lambda v: v >= 0, ">= 0"),
        "min_minority_fraction": (lambda v: 0 <= v < 1, "in [0, 1)"),
        "threshold": (lambda v: 0 < v < 1, "in (0, 1)"),
        "gbdt_eta": (lambda v: 0 < v <= 1, "in (0, 1]"),
        "gbdt_lambda": (lambda v: v >= 0, ">= 0"),
        "gbdt_min_child_weight": (lambda v: v >= 0, ">= 0"),
        "logreg_tol": (lambda v: v > 0, "> 0"),
    }
    for key, (ok, expected) in checks.items():
        if key in out:
            _need(ok(out[key]), f"{where}.{key}", expected, out[key])
    return out


def _list_of(value, allowed: tuple[str, ...], key: str) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    _need(isinstance(value, (list, tuple)) and len(value) > 0, key, f"a non-empty list from {allowed}", value)
    out = []
    for v in value:
        v = str(v).lower()
        _need(v in allowed, key, f"values from {allowed}", v)
        if v not in out:
            out.append(v)
    return tuple(out)


def build_config(raw: dict[str, Any]) -> RunConfig:
    """Validate a fully-merged config dict and build the typed view."""
    seed = _int(raw["seed"], "seed")
    _need(0 <= seed < 2 ** 63, "seed", "a non-negative 63-bit integer", seed)
    data, pre, win, split, models, ev, output = (
        raw[k] for k in ("data", "preprocess", "windows", "split", "models", "eval", "output"))

    synthetic = _bool(data["synthetic"], "data.synthetic")
    paths = data["paths"]
    _need(isinstance(paths, list) and all(isinstance(p, str) for p in paths), "data.paths", "a list of paths", paths)
    if not synthetic and not paths:
        raise ConfigError("data.paths is empty and data.synthetic is false: nothing to ingest")
    s = data["synth"]
    synth = SynthConfig(
        n_subjects=_int(s["n_subjects"], "data.synth.n_subjects"),
        steps_per_subject=_int(s["steps_per_subject"], "data.synth.steps_per_subject"),
        target_prevalence=_num(s["target_prevalence"], "data.synth.target_prevalence"),
        coupling=_num(s["coupling"], "data.synth.coupling"),
        noise_sd=_num(s["noise_sd"], "data.synth.noise_sd"),
        seed=seed,
        lead=_int(s["lead"], "data.synth.lead"),
    ).validate()

    spec = FilterSpec(_int(pre["filter_order"], "preprocess.filter_order"),
                      _num(pre["filter_cutoff"], "preprocess.filter_cutoff")).validate()
    iqr_k = _num(pre["iqr_k"], "preprocess.iqr_k")
    _need(iqr_k > 0, "preprocess.iqr_k", "> 0", iqr_k)
    max_gap = _int(pre["max_gap"], "preprocess.max_gap")
    _need(max_gap >= 0, "preprocess.max_gap", ">= 0", max_gap)

    width = _int(win["width"], "windows.width")
    stride = _int(win["stride"], "windows.stride")
    _need(width >= 2, "windows.width", ">= 2", width)
    _need(stride >= 1, "windows.stride", ">= 1", stride)
    thr = _num(win["hypo_threshold"], "windows.hypo_threshold")
    _need(thr == 70.0, "windows.hypo_threshold", "70 (the clinical cut-off is fixed)", thr)

    fr = split["fractions"]
    _need(isinstance(fr, (list, tuple)) and len(fr) == 3, "split.fractions", "three fractions", fr)
    fr = tuple(_num(v, "split.fractions") for v in fr)
    _need(all(v >= 0 for v in fr) and abs(sum(fr) - 1.0) <= 1e-9, "split.fractions",
          "non-negative values summing to 1 within 1e-9", list(fr))
    _need(fr[0] > 0 and fr[1] > 0 and fr[2] > 0, "split.fractions", "all three splits non-empty", list(fr))
    block_len = _int(split["block_len"], "split.block_len")
    _need(block_len >= width, "split.block_len", f">= window width ({width})", block_len)

    families = _list_of(models["families"], ALL_FAMILIES, "models.families")
    modes = _list_of(models["feature_modes"], ALL_MODES, "models.feature_modes")
    train_d = models["train"]
    _need(isinstance(train_d, dict), "models.train", "a mapping", train_d)
    train = TrainConfig(seed=seed, **_train_config(train_d, seed, "models.train"))
    ov = models["overrides"]
    _need(isinstance(ov, dict), "models.overrides", "a mapping of family to settings", ov)
    overrides = {}
    for fam, d in ov.items():
        _need(fam in ALL_FAMILIES, "models.overrides", f"family names from {ALL_FAMILIES}", fam)
        _need(isinstance(d, dict), f"models.overrides.{fam}", "a mapping", d)
        overrides[fam] = _train_config(d, seed, f"models.overrides.{fam}")

    iters = _int(ev["bootstrap_iterations"], "eval.bootstrap_iterations")
    _need(iters >= 10, "eval.bootstrap_iterations", ">= 10", iters)
    level = _num(ev["ci_level"], "eval.ci_level")
    _need(0 < level < 1, "eval.ci_level", "in (0, 1)", level)

    out_dir = output["dir"]
    _need(isinstance(out_dir, str) and out_dir, "output.dir", "a directory path", out_dir)
    formats = _list_of(output["formats"], REPORT_FORMATS, "output.formats")

    return RunConfig(
        seed=seed, synthetic=synthetic, paths=tuple(paths), synth=synth, filter=spec, iqr_k=iqr_k,
        max_gap=max_gap, width=width, stride=stride, hypo_threshold=thr, fractions=fr,
        block_len=block_len, families=families, feature_modes=modes, train=train, overrides=overrides,
        bootstrap_iterations=iters, ci_level=level, out_dir=out_dir, formats=formats,
        raw=_canonical(raw),
    )


def _canonical(raw: dict[str, Any]) -> dict[str, Any]:
    return json.loads(json.dumps(raw, sort_keys=True, default=list))


def set_path(d: dict[str, Any], dotted: str, value: Any) -> None:
    """Assign ``value`` at a dotted key path inside nested dicts."""
    *parents, leaf = dotted.split(".")
    for p in parents:
        d = d.setdefault(p, {})
    d[leaf] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                default_out: str | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then dotted-key ``overrides``
    (command-line flags win over the file). ``default_out`` replaces the
    built-in output directory but not one set in the file."""
    base = copy.deepcopy(DEFAULTS)
    if default_out:
        base["output"]["dir"] = default_out
    file_values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from exc
        try:
            file_values = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p} is not valid YAML: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {p} must hold a mapping at top level")
    merged = _merge(base, file_values)
    flat: dict[str, Any] = {}
    for dotted, value in (overrides or {}).items():
        set_path(flat, dotted, value)
    merged = _merge(merged, flat)
    return build_config(merged)
