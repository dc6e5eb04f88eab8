import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cokdlab.checkpointing import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from cokdlab.cli import main
from cokdlab.diagnostics import read_correlation_csv, spearman
from cokdlab.experiment import OUT_ENV, load_config
from cokdlab.models import TinySeq2Seq

REPORT_KEYS = {"run_id", "mode", "config_digest", "steps", "data", "test", "valid", "correlation", "best_vs_average", "wall_clock_seconds"}
CSVS = ["steps.csv", "epochs.csv", "evaluations.csv", "correlation.csv", "correlation.json", "trace.json", "train_data.tsv"]


@pytest.fixture(autouse=True)
def _no_env_override(monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)


def small_config(tmp_path, run_id="smoke", **sections):
    cfg = {
        "run_id": run_id,
        "output_dir": str(tmp_path / "out"),
        "task": {"train_pairs": 50},
        "model": {"dim": 8, "hidden": 8},
        "trainer": {"epochs": 2, "batch_tokens": 64},
        "checkpoints": {"k": 2},
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            cfg.setdefault(name, {}).update(values)
        else:
            cfg[name] = values
    path = tmp_path / f"{run_id}.json"
    path.write_text(json.dumps(cfg))
    return path


def run_ok(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    assert code == 0, out.err
    return json.loads(out.out.strip().splitlines()[-1])


def run_fail(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err.strip().splitlines()[-1]
    record = json.loads(err)
    assert record["status"] == "error" and record["exit_code"] == code
    return code, record


def _report(run_dir):
    return json.loads((Path(run_dir) / "report.json").read_text())


# ---------------------------------------------------------------- run


def test_smoke_run_writes_every_artifact(tmp_path, capsys):
    status = run_ok(capsys, "run", small_config(tmp_path))
    run_dir = Path(status["output"])
    assert run_dir == tmp_path / "out" / "smoke"
    report = _report(run_dir)
    assert REPORT_KEYS <= set(report)
    assert report["data"]["train"] == 50
    for name in CSVS + ["config.json", "checkpoints/final.ckpt", "checkpoints/epoch_0001.ckpt", "checkpoints/average_last2.ckpt"]:
        assert (run_dir / name).is_file(), name
    assert set(report["best_vs_average"]) >= {"k", "best_nll", "best_accuracy", "avg_nll", "avg_accuracy"}


def test_report_numbers_come_from_the_csvs(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path))["output"])
    report = _report(run_dir)
    with open(run_dir / "evaluations.csv", newline="") as fh:
        rows = {(r["model"], r["split"]): r for r in csv.DictReader(fh)}
    for split in ("test", "valid"):
        assert float(rows[("final", split)]["nll"]) == report[split]["nll"]
        assert float(rows[("final", split)]["accuracy"]) == report[split]["accuracy"]
    assert float(rows[("average_last2", "valid")]["nll"]) == report["best_vs_average"]["avg_nll"]
    best = min(float(r["nll"]) for (m, s), r in rows.items() if m.startswith("epoch_") and s == "valid")
    assert best == report["best_vs_average"]["best_nll"]
    curve = read_correlation_csv(run_dir / "correlation.csv")
    assert spearman([x for x, _ in curve], [y for _, y in curve]) == report["correlation"]["rho"]
    with open(run_dir / "steps.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == report["steps"]


def test_csv_files_use_lf_and_full_precision(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path))["output"])
    for name in ("steps.csv", "epochs.csv", "evaluations.csv", "correlation.csv"):
        raw = (run_dir / name).read_bytes()
        assert b"\r" not in raw and raw.endswith(b"\n")
    with open(run_dir / "steps.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert float(repr(float(row["loss"]))) == float(row["loss"])
    assert len(row["loss"].replace(".", "").lstrip("0")) >= 15


def test_replay_is_byte_identical(tmp_path, capsys, monkeypatch):
    cfg = small_config(tmp_path, trainer={"mode": "cokd"})
    dirs = []
    for label in ("a", "b"):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / label))
        dirs.append(Path(run_ok(capsys, "run", cfg)["output"]))
    for name in CSVS + ["config.json"] + [f"checkpoints/{p.name}" for p in (dirs[0] / "checkpoints").iterdir()]:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
    ra, rb = _report(dirs[0]), _report(dirs[1])
    ra.pop("wall_clock_seconds"), rb.pop("wall_clock_seconds")
    assert ra == rb


def test_output_env_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "elsewhere"))
    status = run_ok(capsys, "run", small_config(tmp_path))
    assert Path(status["output"]) == tmp_path / "elsewhere" / "smoke"
    assert not (tmp_path / "out").exists()


def test_default_run_id_is_mode_and_digest(tmp_path, capsys):
    path = small_config(tmp_path)
    cfg = json.loads(path.read_text())
    del cfg["run_id"]
    path.write_text(json.dumps(cfg))
    status = run_ok(capsys, "run", path)
    assert status["run_id"] == f"baseline-{load_config(path).digest()}"


@pytest.mark.parametrize("mode", ["word_kd", "finetune"])
def test_other_modes_run(tmp_path, capsys, mode):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path, trainer={"mode": mode}))["output"])
    report = _report(run_dir)
    if mode == "word_kd":
        assert (run_dir / "checkpoints/teacher.ckpt").is_file() and "teacher" in report
    else:
        assert report["finetune"]["lr"] == pytest.approx(1e-2 / 70)
        assert set(report["finetune"]) >= {"pre", "post", "epochs"}
        assert (run_dir / "correlation_pretrained.csv").is_file()


def test_classification_task_runs(tmp_path, capsys):
    path = small_config(tmp_path, task={"kind": "classification", "n_items": 200}, trainer={"mode": "cokd"})
    cfg = json.loads(path.read_text())
    # replace, not merge: translation keys do not belong in a classification task
    cfg["task"] = {"kind": "classification", "n_items": 200}
    path.write_text(json.dumps(cfg))
    report = _report(run_ok(capsys, "run", path)["output"])
    assert report["data"]["train"] == 180


def test_dense_snapshots_produce_second_report(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path, checkpoints={"dense": 3}))["output"])
    report = _report(run_dir)
    assert report["dense"]["snapshots"] == 3
    assert (run_dir / "correlation_dense_average.csv").is_file()


def test_cokd_alpha_zero_matches_split_baseline(tmp_path, capsys):
    a = Path(run_ok(capsys, "run", small_config(tmp_path, "cokd0", trainer={"mode": "cokd", "alpha": 0.0}))["output"])
    b = Path(run_ok(capsys, "run", small_config(tmp_path, "base", trainer={"schedule": "split"}))["output"])
    pa, pb = load_checkpoint(a / "checkpoints/final.ckpt").params, load_checkpoint(b / "checkpoints/final.ckpt").params
    assert all(pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)
    assert (a / "steps.csv").read_bytes() == (b / "steps.csv").read_bytes()


# ---------------------------------------------------------------- failures


def test_unknown_key_exit_2(tmp_path, capsys):
    code, record = run_fail(capsys, "run", small_config(tmp_path, trainer={"alhpa": 0.5}))
    assert code == 2 and "alhpa" in record["message"]


@pytest.mark.parametrize(
    "sections",
    [
        {"trainer": {"alpha": 1.5}},
        {"trainer": {"mode": "mutual"}},
        {"task": {"kind": "poem"}},
        {"checkpoints": {"k": 5}},
        {"model": {"max_len": 4}},
        {"trainer": {"mode": "cokd", "n": 60}},
    ],
)
def test_invalid_configs_exit_2(tmp_path, capsys, sections):
    code, _ = run_fail(capsys, "run", small_config(tmp_path, **sections))
    assert code == 2
    assert not (tmp_path / "out").exists()


def test_malformed_json_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run_fail(capsys, "run", path)[0] == 2


def test_missing_config_exit_4(tmp_path, capsys):
    assert run_fail(capsys, "run", tmp_path / "nope.json")[0] == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3_with_error_record(tmp_path, capsys):
    code, record = run_fail(capsys, "run", small_config(tmp_path, optimizer={"lr": 1e308}))
    assert code == 3 and record["error"] == "TrainingDivergedError"
    saved = json.loads((tmp_path / "out" / "smoke" / "error.json").read_text())
    assert saved == record


# ---------------------------------------------------------------- diagnose


def test_diagnose_reproduces_inline_report(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path))["output"])
    status = run_ok(
        capsys, "diagnose", "--ckpt", run_dir / "checkpoints/final.ckpt", "--trace", run_dir / "trace.json", "--data", run_dir / "train_data.tsv"
    )
    out = Path(status["output"])
    assert out == run_dir / "diagnose"
    assert (out / "correlation.csv").read_bytes() == (run_dir / "correlation.csv").read_bytes()
    assert status["rho"] == _report(run_dir)["correlation"]["rho"]


def test_diagnose_fresh_models_show_no_order_effect(tmp_path, capsys):
    path = small_config(tmp_path, task={"train_pairs": 2000}, trainer={"epochs": 1}, checkpoints={"k": 1})
    run_dir = Path(run_ok(capsys, "run", path)["output"])
    cfg = load_config(path)
    rhos = []
    for seed in range(3):
        ckpt = tmp_path / f"fresh{seed}.ckpt"
        save_checkpoint(Checkpoint.from_model(TinySeq2Seq(cfg.model_spec(), seed=seed)), ckpt)
        status = run_ok(
            capsys, "diagnose", "--ckpt", ckpt, "--trace", run_dir / "trace.json", "--data", run_dir / "train_data.tsv",
            "--out", tmp_path / f"diag{seed}",
        )
        assert status["n_batches"] > 40
        rhos.append(status["rho"])
    assert np.median(np.abs(rhos)) < 0.15, rhos


def test_diagnose_missing_trace_exit_4(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path))["output"])
    code, record = run_fail(
        capsys, "diagnose", "--ckpt", run_dir / "checkpoints/final.ckpt", "--trace", tmp_path / "missing.json", "--data", run_dir / "train_data.tsv"
    )
    assert code == 4 and "trace" in record["message"]


def test_diagnose_mismatched_data_exit_4(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path))["output"])
    short = tmp_path / "short.tsv"
    short.write_text("".join((run_dir / "train_data.tsv").read_text().splitlines(keepends=True)[:5]))
    code, _ = run_fail(
        capsys, "diagnose", "--ckpt", run_dir / "checkpoints/final.ckpt", "--trace", run_dir / "trace.json", "--data", short
    )
    assert code == 4


def test_console_script_exit_code(tmp_path):
    env = {k: v for k, v in os.environ.items() if k != OUT_ENV}
    proc = subprocess.run(
        [sys.executable, "-m", "cokdlab", "diagnose", "--ckpt", "a", "--trace", "b", "--data", "c"],
        capture_output=True, text=True, cwd=tmp_path, env=env,
    )
    assert proc.returncode == 4
    assert json.loads(proc.stderr.strip().splitlines()[-1])["exit_code"] == 4


# ---------------------------------------------------------------- average


def test_average_command(tmp_path, capsys):
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path, trainer={"epochs": 4}))["output"])
    out = tmp_path / "avg.ckpt"
    status = run_ok(capsys, "average", "--ckpts", str(run_dir / "checkpoints/epoch_*.ckpt"), "-k", "3", "--out", out)
    assert [Path(p).name for p in status["averaged"]] == ["epoch_0002.ckpt", "epoch_0003.ckpt", "epoch_0004.ckpt"]
    ckpts = [load_checkpoint(run_dir / f"checkpoints/epoch_{e:04d}.ckpt") for e in range(1, 5)]
    assert load_checkpoint(out).params.equal(average_checkpoints(ckpts, 3))
    # the in-run average of the same epochs agrees
    in_run = run_ok(capsys, "average", "--ckpts", str(run_dir / "checkpoints/epoch_*.ckpt"), "-k", "2", "--out", tmp_path / "a2.ckpt")
    assert len(in_run["averaged"]) == 2
    assert load_checkpoint(tmp_path / "a2.ckpt").params.equal(load_checkpoint(run_dir / "checkpoints/average_last2.ckpt").params)


def test_average_errors(tmp_path, capsys):
    assert run_fail(capsys, "average", "--ckpts", str(tmp_path / "*.ckpt"), "--out", tmp_path / "x.ckpt")[0] == 4
    run_dir = Path(run_ok(capsys, "run", small_config(tmp_path))["output"])
    pattern = str(run_dir / "checkpoints/epoch_*.ckpt")
    assert run_fail(capsys, "average", "--ckpts", pattern, "-k", "9", "--out", tmp_path / "x.ckpt")[0] == 4
    assert run_fail(capsys, "average", "--ckpts", pattern, "-k", "0", "--out", tmp_path / "x.ckpt")[0] == 2


# ---------------------------------------------------------------- sweep


def _sweep_rows(status):
    with open(status["table"], newline="") as fh:
        return list(csv.DictReader(fh))


def test_single_element_sweep_equals_run(tmp_path, capsys):
    path = small_config(tmp_path, trainer={"mode": "cokd"})
    status = run_ok(capsys, "sweep", path, "--param", "alpha=0.95")
    (row,) = _sweep_rows(status)
    run_dir = Path(run_ok(capsys, "run", path)["output"])
    report = _report(run_dir)
    assert row["setting"] == "alpha=0.95" and row["status"] == "ok"
    assert float(row["accuracy"]) == report["test"]["accuracy"]
    assert float(row["nll"]) == report["test"]["nll"]
    cell = tmp_path / "out" / row["run_id"]
    for name in CSVS:
        assert (cell / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_sweep_endpoints(tmp_path, capsys):
    path = small_config(tmp_path, trainer={"mode": "cokd"})
    rows = _sweep_rows(run_ok(capsys, "sweep", path, "--param", "alpha=0,1"))
    assert [r["setting"] for r in rows] == ["alpha=0.0", "alpha=1.0"]
    nll_only = Path(run_ok(capsys, "run", small_config(tmp_path, "nll", trainer={"schedule": "split"}))["output"])
    kd_only = Path(run_ok(capsys, "run", small_config(tmp_path, "kd", trainer={"mode": "cokd", "alpha": 1.0}))["output"])
    for row, ref in zip(rows, (nll_only, kd_only)):
        assert float(row["accuracy"]) == _report(ref)["test"]["accuracy"]
        assert (tmp_path / "out" / row["run_id"] / "steps.csv").read_bytes() == (ref / "steps.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_records_failed_cells_and_continues(tmp_path, capsys):
    path = small_config(tmp_path, optimizer={"lr": 1e308}, trainer={"mode": "cokd"})
    status = run_ok(capsys, "sweep", path, "--param", "alpha=0.5,0.9")
    assert status["status"] == "partial" and status["failed"] == 2
    rows = _sweep_rows(status)
    assert [r["status"] for r in rows] == ["failed(3)", "failed(3)"]
    assert all(r["error"] for r in rows)


@pytest.mark.parametrize("spec", ["lr=0.1", "alpha", "alpha=", "n=one", "alpha=2"])
def test_bad_sweep_parameter_exit_2(tmp_path, capsys, spec):
    assert run_fail(capsys, "sweep", small_config(tmp_path), "--param", spec)[0] == 2


def test_sweep_over_teacher_count_slows_down(tmp_path, capsys):
    path = small_config(tmp_path, task={"train_pairs": 1000}, trainer={"mode": "cokd", "epochs": 3},
                        diagnostics={"heldout_every_epoch": False})
    rows = _sweep_rows(run_ok(capsys, "sweep", path, "--param", "n=1,2,3,4"))
    seconds = [float(r["wall_clock_seconds"]) for r in rows]
    assert all(r["status"] == "ok" for r in rows)
    assert seconds == sorted(seconds) and len(set(seconds)) == 4, seconds
    print("wall clock by n:", seconds)
