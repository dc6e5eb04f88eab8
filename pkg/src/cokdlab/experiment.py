"""Experiment configuration and the end-to-end runner behind the CLI.

A run writes everything under ``<output_dir>/<run_id>/``:

    config.json          the validated config with defaults filled in
    steps.csv            epoch, step, training loss
    epochs.csv           per-epoch mean training loss and held-out metrics
    evaluations.csv      held-out NLL / accuracy of every evaluated model
    correlation.csv/json order-vs-loss report of the final model
    trace.json           final-epoch batch order
    train_data.tsv       the training items the trace indexes into
    checkpoints/         one file per epoch, ``final.ckpt`` and averages
    report.json          summary; every number also appears in a CSV above
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import time
from dataclasses import replace
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Discriminator, Field, Tag, ValidationError, field_validator

from .checkpointing import Checkpoint, average_params, best_vs_average, save_checkpoint
from .data_gen import (
    dump_corpus,
    dump_dataset,
    gen_classification,
    gen_translation,
    split_corpus,
    split_dataset,
    subsample,
)
from .diagnostics import heldout_metrics, imbalance_report, per_item_loss
from .models import ClassifierConfig, ConfigError, Seq2SeqConfig, build_model
from .optimizer import AdamConfig
from .trainer import TrainerConfig, baseline_train, cokd_train, finetune_low_lr, word_kd_train

log = logging.getLogger(__name__)

OUT_ENV = "COKDLAB_OUT"
_RUN_ID = re.compile(r"^[A-Za-z0-9._=+-]+$")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TranslationTask(_Section):
    kind: Literal["translation"] = "translation"
    src_vocab: int = 64
    tgt_vocab: int = 64
    train_pairs: int = 2000
    held_out: float = 0.05
    len_range: tuple[int, int] = (4, 8)
    rule_noise: float = 0.5
    # number of classes the previous source token is folded into for
    # context-dependent rules; None keeps every previous token distinct
    context_classes: Optional[int] = 4
    # draw this many training pairs from the generated training split
    subsample: Optional[int] = None


class ClassificationTask(_Section):
    kind: Literal["classification"] = "classification"
    classes: int = 10
    dim: int = 16
    n_items: int = 2000
    spread: float = 1.0
    held_out: float = 0.05


class ModelSection(_Section):
    # dim and max_len only apply to the translation model
    dim: int = 32
    hidden: int = 48
    max_len: int = 16
    dropout: float = 0.0


class OptimizerSection(_Section):
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    warmup_steps: int = 0


class TrainerSection(_Section):
    mode: Literal["baseline", "cokd", "word_kd", "finetune"] = "baseline"
    epochs: int = 80
    batch_tokens: int = 256
    n: int = 1
    alpha: float = 0.95
    disable_ct: bool = False
    disable_tr: bool = False
    schedule: Literal["shuffle", "split"] = "shuffle"
    teacher_state: Literal["reset", "keep", "copy"] = "reset"
    finetune_lr_divisor: float = 70.0
    finetune_epochs: int = 1


class DiagnosticsSection(_Section):
    correlation: bool = True
    per_sentence: bool = False
    heldout_every_epoch: bool = True
    eval_batch_tokens: int = 2048


class CheckpointSection(_Section):
    every_epoch: bool = True
    k: int = 5
    average: bool = True
    # intra-epoch snapshots in the final epoch, averaged into a second report
    dense: int = 0


class SeedSection(_Section):
    data: int = 1
    init: int = 100
    train: int = 0


def _task_kind(value):
    # a task section without "kind" is a translation task
    if isinstance(value, dict):
        return value.get("kind", "translation")
    return getattr(value, "kind", None)


TaskSection = Annotated[
    Union[Annotated[TranslationTask, Tag("translation")], Annotated[ClassificationTask, Tag("classification")]],
    Discriminator(_task_kind),
]


class ExperimentConfig(_Section):
    run_id: Optional[str] = None
    output_dir: str = "runs"
    task: TaskSection = Field(default_factory=TranslationTask)
    model: ModelSection = Field(default_factory=ModelSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    trainer: TrainerSection = Field(default_factory=TrainerSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    checkpoints: CheckpointSection = Field(default_factory=CheckpointSection)
    seeds: SeedSection = Field(default_factory=SeedSection)

    @field_validator("run_id")
    @classmethod
    def _check_run_id(cls, v):
        if v is not None and not _RUN_ID.match(v):
            raise ValueError("run_id may only contain letters, digits and . _ = + -")
        return v

    def digest(self) -> str:
        body = self.model_dump(mode="json", exclude={"run_id", "output_dir"})
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.trainer.mode}-{self.digest()}"

    def output_root(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.output_dir)

    def run_dir(self) -> Path:
        return self.output_root() / self.resolved_run_id()

    def model_spec(self):
        if isinstance(self.task, TranslationTask):
            return Seq2SeqConfig(
                self.task.src_vocab, self.task.tgt_vocab, self.model.dim, self.model.hidden, self.model.max_len, self.model.dropout
            )
        return ClassifierConfig(self.task.dim, self.model.hidden, self.task.classes, self.model.dropout)

    def trainer_config(self) -> TrainerConfig:
        t = self.trainer
        return TrainerConfig(
            epochs=t.epochs,
            batch_tokens=t.batch_tokens,
            optim=AdamConfig(**self.optimizer.model_dump()),
            n=t.n,
            alpha=t.alpha,
            disable_ct=t.disable_ct,
            disable_tr=t.disable_tr,
            seed=self.seeds.train,
            schedule=t.schedule,
            dense_checkpoints=self.checkpoints.dense,
            teacher_state=t.teacher_state,
        )

    def validate_all(self) -> None:
        """Cross-field checks; raises ConfigError before any work is done."""
        self.model_spec().validate()
        self.trainer_config().validate()
        task = self.task
        if not 0.0 < task.held_out < 0.5:
            raise ConfigError("held_out must lie in (0, 0.5)")
        if isinstance(task, TranslationTask):
            lo, hi = task.len_range
            if hi + 1 > self.model.max_len:
                raise ConfigError(f"max_len {self.model.max_len} cannot hold sentences of length {hi} plus EOS")
            if hi + 1 > self.trainer.batch_tokens:
                raise ConfigError("batch_tokens smaller than the longest sentence")
            if task.train_pairs < 10:
                raise ConfigError("train_pairs must be at least 10")
            if task.subsample is not None and not 0 < task.subsample <= task.train_pairs:
                raise ConfigError("subsample must lie in (0, train_pairs]")
        n_train = (task.subsample or task.train_pairs) if isinstance(task, TranslationTask) else task.n_items
        if self.trainer.mode == "cokd" and self.trainer.n + 1 > n_train:
            raise ConfigError(f"cannot split {n_train} training items into n + 1 = {self.trainer.n + 1} subsets")
        c = self.checkpoints
        if c.k < 1:
            raise ConfigError("checkpoints.k must be >= 1")
        if c.average and c.every_epoch and c.k > self.trainer.epochs:
            raise ConfigError(f"cannot average the last {c.k} checkpoints of a {self.trainer.epochs}-epoch run")
        if self.trainer.finetune_lr_divisor <= 0 or self.trainer.finetune_epochs < 1:
            raise ConfigError("finetune_lr_divisor must be > 0 and finetune_epochs >= 1")
        if self.diagnostics.eval_batch_tokens < 1:
            raise ConfigError("eval_batch_tokens must be >= 1")


def parse_config(payload: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(problems) from None
    cfg.validate_all()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(payload)


def with_override(cfg: ExperimentConfig, section: str, key: str, value, run_id: str) -> ExperimentConfig:
    payload = cfg.model_dump(mode="json")
    payload[section][key] = value
    payload["run_id"] = run_id
    return parse_config(payload)


# ---------------------------------------------------------------- data


def build_data(cfg: ExperimentConfig):
    task = cfg.task
    if isinstance(task, TranslationTask):
        frac = 1.0 - 2.0 * task.held_out
        total = int(round(task.train_pairs / frac))
        corpus = gen_translation(
            cfg.seeds.data, task.src_vocab, task.tgt_vocab, total, task.len_range, task.rule_noise, task.context_classes
        )
        train, valid, test = split_corpus(corpus, task.held_out)
        if task.subsample is not None:
            train = subsample(train, task.subsample, cfg.seeds.data)
        return train.pairs, valid.pairs, test.pairs
    data = gen_classification(cfg.seeds.data, task.classes, task.dim, task.n_items, task.spread)
    train, valid, test = split_dataset(data, task.held_out)
    return train.items, valid.items, test.items


# ---------------------------------------------------------------- writers


def _fmt(x: float) -> str:
    return f"{x:.17g}"


class _CsvStream:
    """Append-only CSV written row by row (LF endings, 17 significant digits)."""

    def __init__(self, path: Path, header: list[str]):
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(header)
        self._fh.flush()

    def write(self, row) -> None:
        self._writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class _Evaluations:
    def __init__(self, path: Path):
        self.stream = _CsvStream(path, ["model", "split", "nll", "accuracy"])
        self.rows: dict[tuple[str, str], dict] = {}

    def add(self, tag: str, split: str, metrics: dict) -> dict:
        self.stream.write([tag, split, metrics["nll"], metrics["accuracy"]])
        self.rows[(tag, split)] = metrics
        return metrics


# ---------------------------------------------------------------- runner


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured mode end to end and return the report dict."""
    start = time.perf_counter()
    run_id = cfg.resolved_run_id()
    out = cfg.run_dir()
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    train, valid, test = build_data(cfg)
    if isinstance(cfg.task, TranslationTask):
        dump_corpus(train, out / "train_data.tsv")
    else:
        dump_dataset(train, out / "train_data.tsv")

    spec = cfg.model_spec()
    tcfg = cfg.trainer_config()
    mode = cfg.trainer.mode
    ebt = cfg.diagnostics.eval_batch_tokens
    evals = _Evaluations(out / "evaluations.csv")
    streams = {"epochs": _CsvStream(out / "epochs.csv", ["phase", "epoch", "valid_nll", "valid_accuracy"])}
    report: dict = {"run_id": run_id, "mode": mode, "config_digest": cfg.digest()}

    def hook(phase: str):
        if not cfg.diagnostics.heldout_every_epoch:
            return None

        def on_epoch_end(epoch, model):
            m = heldout_metrics(model, valid, ebt)
            streams["epochs"].write([phase, epoch, m["nll"], m["accuracy"]])
            return m

        return on_epoch_end

    model = build_model(spec, seed=cfg.seeds.init)
    try:
        if mode == "baseline":
            metrics = baseline_train(model, train, tcfg, on_epoch_end=hook("train"))
        elif mode == "cokd":
            metrics = cokd_train(model, train, tcfg, on_epoch_end=hook("train"))
        elif mode == "word_kd":
            teacher = build_model(spec, seed=cfg.seeds.init + 1)
            t_metrics = baseline_train(
                teacher, train, replace(tcfg, seed=cfg.seeds.train + 1, dense_checkpoints=0),
                on_epoch_end=hook("teacher"),
            )
            save_checkpoint(Checkpoint.from_model(teacher, epoch=tcfg.epochs, step=t_metrics.steps, run_id=run_id), ckpt_dir / "teacher.ckpt")
            report["teacher"] = {"test": evals.add("teacher", "test", heldout_metrics(teacher, test, ebt))}
            metrics = word_kd_train(model, teacher, train, tcfg, on_epoch_end=hook("train"))
        else:
            metrics = baseline_train(model, train, tcfg, on_epoch_end=hook("train"))
    finally:
        streams["epochs"].close()

    # step losses of the main training phase
    steps_csv = _CsvStream(out / "steps.csv", ["phase", "epoch", "step", "loss"])
    for epoch, step, loss in metrics.step_losses:
        steps_csv.write(["train", epoch, step, loss])

    if cfg.checkpoints.every_epoch:
        for snap in metrics.epoch_snapshots:
            save_checkpoint(
                Checkpoint.from_model(model, snap.params, snap.epoch, snap.step, run_id), ckpt_dir / f"epoch_{snap.epoch:04d}.ckpt"
            )

    trace = metrics.trace
    trace.save(out / "trace.json")
    report["steps"] = metrics.steps
    report["data"] = {"train": len(train), "valid": len(valid), "test": len(test), "batches_per_epoch": len(trace)}

    if mode == "finetune":
        pre_tag = "pretrained"
        report["finetune"] = {"pre": _correlation(model, trace, train, out, "correlation_pretrained", pre_tag)}
        report["finetune"]["pre_test"] = evals.add(pre_tag, "test", heldout_metrics(model, test, ebt))
        save_checkpoint(Checkpoint.from_model(model, epoch=tcfg.epochs, step=metrics.steps, run_id=run_id), ckpt_dir / "pretrained.ckpt")
        new_lr = cfg.optimizer.lr / cfg.trainer.finetune_lr_divisor
        streams["epochs"] = _CsvStream(out / "epochs_finetune.csv", ["phase", "epoch", "valid_nll", "valid_accuracy"])
        try:
            ft = finetune_low_lr(model, train, tcfg, new_lr, cfg.trainer.finetune_epochs, on_epoch_end=hook("finetune"))
        finally:
            streams["epochs"].close()
        for epoch, step, loss in ft.step_losses:
            steps_csv.write(["finetune", epoch, step, loss])
        trace = ft.trace
        trace.save(out / "trace.json")
        report["finetune"]["lr"] = new_lr
        report["finetune"]["epochs"] = cfg.trainer.finetune_epochs
    steps_csv.close()

    final_epoch = trace.epoch
    save_checkpoint(Checkpoint.from_model(model, epoch=final_epoch, step=report["steps"], run_id=run_id), ckpt_dir / "final.ckpt")
    report["test"] = evals.add("final", "test", heldout_metrics(model, test, ebt))
    report["valid"] = evals.add("final", "valid", heldout_metrics(model, valid, ebt))

    if cfg.diagnostics.correlation:
        report["correlation"] = _correlation(model, trace, train, out, "correlation", "final")
        if mode == "finetune":
            report["finetune"]["post"] = report["correlation"]
    if cfg.diagnostics.per_sentence:
        with open(out / "per_sentence.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["batch_id", "item", "mean_loss"])
            for batch_id, item, loss in per_item_loss(model, trace, train):
                writer.writerow([batch_id, item, _fmt(loss)])

    k = cfg.checkpoints.k
    if cfg.checkpoints.average and cfg.checkpoints.every_epoch:
        ckpts = [Checkpoint.from_model(model, s.params, s.epoch, s.step, run_id) for s in metrics.epoch_snapshots]

        def eval_params(params):
            return heldout_metrics(build_model(spec, params=params), valid, ebt)

        bva = best_vs_average(ckpts, k, eval_params)
        for c, m in zip(ckpts, bva.pop("single")):
            evals.add(f"epoch_{c.epoch:04d}", "valid", m)
        avg_params = average_params([c.params for c in ckpts[-k:]])
        evals.add(f"average_last{k}", "valid", {"nll": bva["avg_nll"], "accuracy": bva["avg_accuracy"]})
        avg_model = build_model(spec, params=avg_params)
        save_checkpoint(Checkpoint.from_model(avg_model, epoch=ckpts[-1].epoch, step=ckpts[-1].step, run_id=run_id), ckpt_dir / f"average_last{k}.ckpt")
        bva["avg_test"] = evals.add(f"average_last{k}", "test", heldout_metrics(avg_model, test, ebt))
        if cfg.diagnostics.correlation:
            # the averaged model measured over the main phase's final-epoch order
            bva["avg_correlation"] = _correlation(avg_model, metrics.trace, train, out, f"correlation_average_last{k}", f"average_last{k}")
        report["best_vs_average"] = bva

    if cfg.checkpoints.dense and metrics.dense_snapshots:
        dense_model = build_model(spec, params=average_params([s.params for s in metrics.dense_snapshots]))
        save_checkpoint(Checkpoint.from_model(dense_model, epoch=tcfg.epochs, step=metrics.steps, run_id=run_id), ckpt_dir / "dense_average.ckpt")
        report["dense"] = {
            "snapshots": len(metrics.dense_snapshots),
            "correlation": _correlation(dense_model, metrics.trace, train, out, "correlation_dense_average", "dense_average"),
            "test": evals.add("dense_average", "test", heldout_metrics(dense_model, test, ebt)),
        }
    evals.stream.close()

    report["wall_clock_seconds"] = time.perf_counter() - start
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("run %s finished in %.1fs", run_id, report["wall_clock_seconds"])
    return report


def _correlation(model, trace, items, out: Path, stem: str, tag: str) -> dict:
    rep = imbalance_report(model, trace, items, tag)
    rep.write(out / f"{stem}.csv", out / f"{stem}.json")
    return rep.summary()
