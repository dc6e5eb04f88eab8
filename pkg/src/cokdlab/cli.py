"""Command line entry point: ``run``, ``sweep``, ``diagnose`` and ``average``.

Exit codes: 0 success, 2 invalid configuration, 3 training diverged,
4 missing/corrupt/incompatible files.  Failures print a one-line JSON error
record on stderr (and into the run directory when one exists).
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
import time
from pathlib import Path

from .checkpointing import Checkpoint, CheckpointError, average_checkpoints, load_checkpoint, save_checkpoint
from .data_gen import load_corpus, load_dataset
from .diagnostics import BatchTrace, imbalance_report
from .experiment import OUT_ENV, load_config, run_experiment, with_override
from .models import ConfigError
from .optimizer import TrainingDivergedError

log = logging.getLogger("cokdlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

SWEEPABLE = {"alpha": float, "n": int}


class ArtifactError(Exception):
    """An input file is missing, unreadable or does not fit the others."""


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, (ArtifactError, CheckpointError, OSError)):
        return EXIT_IO
    raise exc


def error_record(exc: BaseException, code: int) -> dict:
    return {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}


def _fail(exc: BaseException, where: Path | None = None) -> int:
    code = exit_code_for(exc)
    record = error_record(exc, code)
    print(json.dumps(record), file=sys.stderr)
    if where is not None and where.is_dir():
        try:
            (where / "error.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def cmd_run(args) -> int:
    run_dir = None
    try:
        cfg = load_config(args.config)
        run_dir = cfg.run_dir()
        report = run_experiment(cfg)
    except (ConfigError, TrainingDivergedError, ArtifactError, CheckpointError, OSError) as exc:
        return _fail(exc, run_dir)
    print(json.dumps({"status": "ok", "run_id": report["run_id"], "output": str(run_dir)}))
    return EXIT_OK


def _parse_sweep(spec: str) -> tuple[str, list]:
    name, sep, values = spec.partition("=")
    if not sep or name not in SWEEPABLE:
        raise ConfigError(f"--param must look like alpha=0.9,0.95 or n=1,2 (got {spec!r})")
    try:
        parsed = [SWEEPABLE[name](v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse values for {name}: {values!r}") from None
    if not parsed:
        raise ConfigError("--param needs at least one value")
    return name, parsed


def cmd_sweep(args) -> int:
    try:
        base = load_config(args.config)
        name, values = _parse_sweep(args.param)
        base_id = base.resolved_run_id()
        # validate every cell before running any of them
        cells = [(v, with_override(base, "trainer", name, v, f"{base_id}-{name}={v}")) for v in values]
        sweep_dir = base.output_root() / f"{base_id}-sweep-{name}"
        sweep_dir.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        return _fail(exc)

    failures = 0
    with open(sweep_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["setting", "run_id", "accuracy", "nll", "wall_clock_seconds", "status", "error"])
        for value, cell in cells:
            setting = f"{name}={value}"
            t0 = time.perf_counter()
            try:
                report = run_experiment(cell)
            except (ConfigError, TrainingDivergedError, ArtifactError, CheckpointError, OSError) as exc:
                failures += 1
                code = exit_code_for(exc)
                log.warning("sweep cell %s failed: %s", setting, exc)
                _fail(exc, cell.run_dir())
                writer.writerow([setting, cell.resolved_run_id(), "", "", f"{time.perf_counter() - t0:.17g}", f"failed({code})", str(exc)])
            else:
                test = report["test"]
                writer.writerow(
                    [setting, cell.resolved_run_id(), f"{test['accuracy']:.17g}", f"{test['nll']:.17g}",
                     f"{report['wall_clock_seconds']:.17g}", "ok", ""]
                )
            fh.flush()
    print(json.dumps({"status": "ok" if not failures else "partial", "cells": len(cells), "failed": failures,
                      "table": str(sweep_dir / "sweep.csv")}))
    return EXIT_OK


def diagnose(ckpt_path, trace_path, data_path):
    """Post-hoc order-vs-loss report from saved artifacts only."""
    for label, p in (("checkpoint", ckpt_path), ("trace", trace_path), ("data", data_path)):
        if not Path(p).is_file():
            raise ArtifactError(f"{label} file not found: {p}")
    ckpt = load_checkpoint(ckpt_path)
    try:
        trace = BatchTrace.load(trace_path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ArtifactError(f"{trace_path}: unreadable trace ({exc})") from None
    kind = ckpt.model_config.get("kind")
    try:
        items = load_dataset(data_path) if kind == "classifier" else load_corpus(data_path)
    except ValueError as exc:
        raise ArtifactError(str(exc)) from None
    model = ckpt.build_model()
    try:
        return ckpt, imbalance_report(model, trace, items, Path(ckpt_path).stem)
    except (ValueError, IndexError) as exc:
        raise ArtifactError(f"checkpoint, trace and data do not fit together: {exc}") from None


def default_diagnose_dir(ckpt_path, run_id: str) -> Path:
    """``<out>/<run_id>/diagnose``; <out> is $COKDLAB_OUT, else the run
    directory holding the checkpoint, else ``runs``."""
    run_id = run_id or "diagnose"
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV]) / run_id / "diagnose"
    parent = Path(ckpt_path).resolve().parent
    if parent.name == "checkpoints" and parent.parent.name == run_id:
        return parent.parent / "diagnose"
    return Path("runs") / run_id / "diagnose"


def cmd_diagnose(args) -> int:
    try:
        ckpt, report = diagnose(args.ckpt, args.trace, args.data)
        out = Path(args.out) if args.out else default_diagnose_dir(args.ckpt, ckpt.run_id)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "correlation.csv", out / "correlation.json")
    except (ArtifactError, CheckpointError, OSError) as exc:
        return _fail(exc)
    print(json.dumps({"status": "ok", **report.summary(), "output": str(out)}))
    return EXIT_OK


def cmd_average(args) -> int:
    try:
        paths = sorted(glob.glob(args.ckpts))
        if not paths:
            raise ArtifactError(f"no checkpoint matches {args.ckpts!r}")
        ckpts = [load_checkpoint(p) for p in paths]
        # chronological, so "last k" means the most recent ones
        order = sorted(range(len(ckpts)), key=lambda i: (ckpts[i].epoch, ckpts[i].step, paths[i]))
        ckpts = [ckpts[i] for i in order]
        if args.k > len(ckpts):
            raise ArtifactError(f"-k {args.k} but only {len(ckpts)} checkpoints match")
        try:
            params = average_checkpoints(ckpts, args.k)
        except ValueError as exc:
            raise ArtifactError(str(exc)) from None
        last = ckpts[-1]
        out = Checkpoint(params, last.epoch, last.step, last.run_id, last.model_config_hash, last.model_config)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, args.out)
    except (ArtifactError, CheckpointError, OSError) as exc:
        return _fail(exc)
    used = [paths[i] for i in order][-args.k :]
    print(json.dumps({"status": "ok", "averaged": used, "output": args.out}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cokdlab", description="Online distillation and training-order diagnostics on toy tasks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a config once per value of alpha or n")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="e.g. alpha=0.75,0.9,0.95 or n=1,2,3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="order-vs-loss report from a checkpoint, trace and data file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory (default <out>/<run_id>/diagnose)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("average", help="average the last k checkpoints matching a glob")
    p.add_argument("--ckpts", required=True, help="glob pattern, quote it")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_average)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "k", 1) < 1:
        return _fail(ConfigError("-k must be >= 1"))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
