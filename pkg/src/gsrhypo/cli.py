"""Command-line entry point.

Subcommands: synth, ingest, preprocess, train, evaluate, ablate, report.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal or numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .config import RunConfig, load_config
from .dsp import preprocess_subject
from .errors import ConfigError, DataError, GsrHypoError
from .eval.experiment import (
    PreparedData,
    build_windows,
    cell_name,
    load_cohort,
    run_experiment,
    split_windows,
)
from .eval.report import from_json, write_reports
from .ingest import write_subject_csv
from .models import fit_model, save_model
from .models.persist import config_digest
from .seeds import derive_seed
from .windowing import SplitAssignment, WindowSet, class_weights

OUT_ENV = "GSRHYPO_OUT"
log = logging.getLogger("gsrhypo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class _SeedFilter(logging.Filter):
    def __init__(self, seed):
        super().__init__()
        self.seed = seed

    def filter(self, record):
        record.seed = self.seed
        return True


def _setup_logging(seed, verbose: bool, log_file: Path | None = None):
    root = logging.getLogger("gsrhypo")
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s seed=%(seed)s %(levelname)s %(name)s: %(message)s")
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    for h in handlers:
        h.setFormatter(fmt)
        h.addFilter(_SeedFilter(seed))
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, then output.dir)")
    common.add_argument("--models", help="comma-separated families, e.g. lstm,cnn")
    common.add_argument("--feature-mode", choices=("sequence", "static", "both"))
    common.add_argument("--synthetic", action="store_true", help="use the synthetic cohort")
    common.add_argument("--force", action="store_true", help="ignore cached intermediates")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key by dotted path, e.g. data.synth.coupling=0.9")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gsrhypo", description="Hypoglycemia detection from skin-conductance windows.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("synth", parents=[common], help="write the synthetic cohort as canonical CSV")
    for name, text in (("ingest", "parse subject files into canonical CSV"),
                       ("preprocess", "align, mask, filter, standardize and window")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("inputs", nargs="*", help="subject XML/CSV files (default: data.paths)")
    for name, text in (("train", "fit the requested models and save them"),
                       ("evaluate", "run the model matrix and write reports"),
                       ("ablate", "sequence-versus-static comparison for the requested models")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("inputs", nargs="*", help="subject XML/CSV files (default: data.paths)")
    sub.add_parser("report", parents=[common], help="re-render reports from report.json")
    return p


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.models:
        overrides["models.families"] = [m.strip().lower() for m in args.models.split(",") if m.strip()]
    mode = args.feature_mode or ("both" if args.command == "ablate" else None)
    if mode:
        overrides["models.feature_modes"] = ["sequence", "static"] if mode == "both" else [mode]
    if args.synthetic:
        overrides["data.synthetic"] = True
    inputs = getattr(args, "inputs", None)
    if inputs:
        overrides["data.paths"] = list(inputs)
        if not args.synthetic:
            overrides["data.synthetic"] = False
    if args.out:
        overrides["output.dir"] = args.out
    return load_config(args.config, overrides, default_out=os.environ.get(OUT_ENV))


def _echo_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=True))


# --------------------------------------------------------------------------
# cached preparation


def _cache_dir(cfg: RunConfig, out: Path) -> Path:
    return out / "cache" / cfg.data_digest()[:16]


def prepared_data(cfg: RunConfig, out: Path, force: bool) -> PreparedData:
    """Windows and split for ``cfg``, reused from the cache when the data
    digest matches and ``force`` is off."""
    cache = _cache_dir(cfg, out)
    wpath, spath = cache / "windows.csv", cache / f"split-{_split_key(cfg)}.npz"
    if not force and wpath.exists():
        ws = WindowSet.from_csv(wpath.read_bytes())
        log.info("reusing cached windows from %s", wpath)
    else:
        ws = build_windows(load_cohort(cfg), cfg)
        cache.mkdir(parents=True, exist_ok=True)
        wpath.write_bytes(ws.to_csv())
    if not force and spath.exists():
        with np.load(spath) as z:
            split = SplitAssignment(z["train"], z["val"], z["test"], z["dropped"], int(z["seed"]))
    else:
        split = split_windows(ws, cfg)
        cache.mkdir(parents=True, exist_ok=True)
        np.savez(spath, train=split.train, val=split.val, test=split.test, dropped=split.dropped,
                 seed=split.seed)
    return PreparedData(ws, split, sorted(set(map(str, ws.subject_ids))))


def _split_key(cfg: RunConfig) -> str:
    return config_digest({"split": cfg.raw["split"], "seed": cfg.seed})[:12]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    cohort = load_cohort(dataclasses.replace(cfg, synthetic=True))
    dest = out / "data"
    dest.mkdir(parents=True, exist_ok=True)
    for rec in cohort.subjects:
        (dest / f"{rec.subject_id}.csv").write_bytes(write_subject_csv(rec))
    log.info("wrote %d synthetic subjects to %s", len(cohort.subjects), dest)
    return 0


def cmd_ingest(cfg: RunConfig, out: Path, args) -> int:
    cohort = load_cohort(cfg)
    dest = out / "ingested"
    dest.mkdir(parents=True, exist_ok=True)
    for rec in cohort.subjects:
        (dest / f"{rec.subject_id}.csv").write_bytes(write_subject_csv(rec))
        log.info("%s: %d glucose, %d GSR samples, %d skipped rows", rec.subject_id,
                 len(rec.glucose), len(rec.gsr), rec.skipped_count)
    return 0


def cmd_preprocess(cfg: RunConfig, out: Path, args) -> int:
    cohort = load_cohort(cfg)
    dest = out / "preprocessed"
    dest.mkdir(parents=True, exist_ok=True)
    for rec in cohort.subjects:
        series = preprocess_subject(rec, cfg.filter, cfg.max_gap, cfg.iqr_k)
        (dest / f"{rec.subject_id}.csv").write_bytes(series.to_csv())
    data = prepared_data(cfg, out, True)
    log.info("%d windows, %d hypo; split train/val/test = %d/%d/%d", len(data.windows),
             int(data.windows.labels.sum()), len(data.split.train), len(data.split.val), len(data.split.test))
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    data = prepared_data(cfg, out, args.force)
    train, val = data.part("train"), data.part("val")
    dest = out / "models"
    dest.mkdir(parents=True, exist_ok=True)
    failures = 0
    for family in sorted(cfg.families):
        for mode in cfg.feature_modes:
            tc = cfg.train_config(family, seed=derive_seed(cfg.seed, "model", family, mode),
                                  class_weights=class_weights(train.labels))
            started = time.perf_counter()
            try:
                model = fit_model(family, train, val, mode, tc)
            except GsrHypoError as exc:
                log.error("%s/%s failed: %s", family, mode, exc)
                failures += 1
                continue
            path = save_model(model, dest / f"{cell_name(family, mode)}.model")
            log.info("%s/%s trained in %.1fs -> %s", family, mode, time.perf_counter() - started, path)
    return 3 if failures == len(cfg.families) * len(cfg.feature_modes) else 0


def _run_matrix(cfg: RunConfig, out: Path, args) -> int:
    data = prepared_data(cfg, out, args.force)
    models_dir = out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)

    def keep(family, mode, model):
        save_model(model, models_dir / f"{cell_name(family, mode)}.model")

    report = run_experiment(data, cfg, on_model=keep)
    written = write_reports(report, out, cfg.formats)
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n")
    failed = [r for r in report.rows if r["status"] != "ok"]
    log.info("wrote %d report files to %s (%d of %d models failed)", len(written), out, len(failed),
             len(report.rows))
    return 0


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    src = out / "report.json"
    if not src.exists():
        raise ConfigError(f"no report.json in {out}; run evaluate first")
    report = from_json(src.read_bytes())
    formats = [f for f in cfg.formats if f != "json"] or ["markdown"]
    write_reports(report, out, formats)
    log.info("re-rendered %s from %s", ", ".join(formats), src)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": _run_matrix,
    "ablate": _run_matrix,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    seed: Any = args.seed if args.seed is not None else "?"
    _setup_logging(seed, args.verbose)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        _setup_logging(cfg.seed, args.verbose, out / "run.log")
        log.info("gsrhypo %s %s (config digest %s)", __version__, args.command, cfg.digest()[:12])
        _echo_config(cfg, out)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return exc.exit_code
    except DataError as exc:
        log.error("data error: %s", exc)
        return exc.exit_code
    except GsrHypoError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort exit code discipline
        log.exception("internal error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
