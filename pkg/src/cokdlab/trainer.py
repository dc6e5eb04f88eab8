"""Training loops: plain NLL baseline, complementary online distillation
(COKD) with its ablations, offline word-level KD, and low-LR fine-tuning.

Randomness is split into independent streams derived from ``seed``: the
student's data schedule, the teachers' schedules/initialisation, and
dropout.  Because the student stream is shared by ``baseline_train`` with
``schedule="split"`` and ``cokd_train``, the two see identical batch
sequences, which is what makes the alpha=0 reduction checkable bit-for-bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .data_gen import Batch, make_epoch_batches
from .diagnostics import BatchTrace
from .losses import LossValue, interpolated_loss, multi_teacher_kd_loss, nll_loss
from .models import ConfigError, ParamSet, PreparedBatch, build_model, copy_params
from .optimizer import AdamConfig, AdamState, TrainingDivergedError, adam_step, reset_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 30
    batch_tokens: int = 256
    optim: AdamConfig = field(default_factory=AdamConfig)
    n: int = 1
    alpha: float = 0.95
    disable_ct: bool = False
    disable_tr: bool = False
    seed: int = 0
    # "shuffle": one permutation per epoch; "split": the student-side
    # schedule of cokd_train (partition into n+1 splits, shuffle within)
    schedule: str = "shuffle"
    # intra-epoch snapshots taken during the final epoch (0 = none)
    dense_checkpoints: int = 0
    # teacher optimizer state at reinitialisation: "reset" | "keep" | "copy"
    teacher_state: str = "reset"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_tokens < 1:
            raise ConfigError("batch_tokens must be >= 1")
        if self.n < 1:
            raise ConfigError("n (number of teachers) must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.schedule not in ("shuffle", "split"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.dense_checkpoints < 0:
            raise ConfigError("dense_checkpoints must be >= 0")
        self.optim.validate()


@dataclass
class Snapshot:
    epoch: int
    step: int
    params: ParamSet


@dataclass
class TrainMetrics:
    """Everything a run records; ``schedule`` holds every epoch's student batches."""

    step_losses: list[tuple[int, int, float]] = field(default_factory=list)
    schedule: list[list[Batch]] = field(default_factory=list)
    trace: BatchTrace | None = None
    epoch_snapshots: list[Snapshot] = field(default_factory=list)
    dense_snapshots: list[Snapshot] = field(default_factory=list)
    epoch_evals: list[dict] = field(default_factory=list)
    # per epoch, per teacher: item indices consumed, in order
    teacher_items: list[list[list[int]]] = field(default_factory=list)
    # per epoch: did every teacher equal the student right after the epoch?
    teachers_equal_student: list[bool] = field(default_factory=list)
    steps: int = 0


EpochHook = Callable[[int, object], dict | None]


class _Streams:
    def __init__(self, seed: int):
        student, teacher, dropout, init, teacher_dropout = np.random.SeedSequence(seed).spawn(5)
        self.student = np.random.default_rng(student)
        self.teacher = np.random.default_rng(teacher)
        self.dropout = np.random.default_rng(dropout)
        self.init = np.random.default_rng(init)
        self.teacher_dropout = np.random.default_rng(teacher_dropout)


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**62))


def ordering(i: int, t: int, n: int) -> int:
    """Split (1-based) that teacher ``i`` trains on at time step ``t``."""
    if n < 1 or not 1 <= i <= n or not 1 <= t <= n + 1:
        raise ValueError(f"ordering out of range: i={i}, t={t}, n={n}")
    return i + t if i + t <= n + 1 else i + t - n - 1


@dataclass
class EpochPartition:
    splits: list[np.ndarray]

    @property
    def n(self) -> int:
        return len(self.splits) - 1


def partition_epoch(epoch_indices: Sequence[int], n: int, rng: np.random.Generator) -> EpochPartition:
    """Random permutation cut into ``n + 1`` contiguous near-equal chunks
    (earlier chunks absorb the remainder)."""
    indices = np.asarray(epoch_indices, dtype=np.int64)
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(indices) < n + 1:
        raise ValueError(f"cannot split {len(indices)} items into {n + 1} subsets")
    return EpochPartition(list(np.array_split(rng.permutation(indices), n + 1)))


def _student_epoch_batches(items, cfg: TrainerConfig, rng: np.random.Generator) -> list[list[Batch]]:
    """Student batches for one epoch, grouped by time step."""
    if cfg.schedule == "shuffle":
        return [make_epoch_batches(items, cfg.batch_tokens, _draw_seed(rng))]
    part = partition_epoch(np.arange(len(items)), cfg.n, rng)
    return [make_epoch_batches(items, cfg.batch_tokens, _draw_seed(rng), indices=s) for s in part.splits]


def _renumber(groups: list[list[Batch]]) -> list[Batch]:
    flat = [b for group in groups for b in group]
    return [Batch(i, b.indices, b.token_count) for i, b in enumerate(flat)]


def _prepare(model, items, batch: Batch) -> PreparedBatch:
    return model.prepare([items[i] for i in batch.indices])


def _teacher_probs(teachers, prepared: PreparedBatch) -> list[np.ndarray]:
    # evaluation mode, no tape: distillation targets are constants
    return [np.exp(t.log_probs(prepared, train=False).data) for t in teachers]


def _step(model, state: AdamState, prepared: PreparedBatch, loss_fn, dropout_rng, where: str) -> float:
    with nn.Tape() as tape:
        log_probs = model.log_probs(prepared, train=True, rng=dropout_rng)
        loss: LossValue = loss_fn(log_probs, prepared)
        objective = loss.mean
    value = objective.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at {where}")
    model.params.zero_grad()
    nn.backward(objective, tape)
    adam_step(model.params, model.params.grads(), state)
    return value


def _nll(log_probs, prepared: PreparedBatch) -> LossValue:
    return nll_loss(log_probs, prepared.targets, prepared.mask)


class _Run:
    """Shared bookkeeping for the student side of every training loop."""

    def __init__(self, model, items, cfg: TrainerConfig, on_epoch_end: EpochHook | None):
        cfg.validate()
        self.model, self.items, self.cfg = model, items, cfg
        self.state = AdamState.for_params(model.params, cfg.optim)
        self.metrics = TrainMetrics()
        self.on_epoch_end = on_epoch_end
        self.streams = _Streams(cfg.seed)

    def train_batches(self, epoch: int, batches: Sequence[Batch], loss_fn, dense_marks: set[int], offset: int) -> None:
        for j, batch in enumerate(batches):
            prepared = _prepare(self.model, self.items, batch)
            where = f"epoch {epoch}, batch {offset + j}"
            loss = _step(self.model, self.state, prepared, loss_fn(prepared), self.streams.dropout, where)
            self.metrics.steps += 1
            self.metrics.step_losses.append((epoch, self.metrics.steps, loss))
            if offset + j + 1 in dense_marks:
                self.metrics.dense_snapshots.append(Snapshot(epoch, self.metrics.steps, self.model.params.copy()))

    def dense_marks(self, epoch: int, n_batches: int) -> set[int]:
        k = self.cfg.dense_checkpoints
        if not k or epoch != self.cfg.epochs:
            return set()
        return {math.ceil(m * n_batches / k) for m in range(1, k + 1)}

    def end_epoch(self, epoch: int, groups: list[list[Batch]]) -> None:
        flat = _renumber(groups)
        self.metrics.schedule.append(flat)
        self.metrics.epoch_snapshots.append(Snapshot(epoch, self.metrics.steps, self.model.params.copy()))
        if epoch == self.cfg.epochs:
            self.metrics.trace = BatchTrace.from_batches(flat, epoch)
        if self.on_epoch_end is not None:
            record = self.on_epoch_end(epoch, self.model)
            if record is not None:
                self.metrics.epoch_evals.append({"epoch": epoch, **record})


def baseline_train(
    model,
    items: Sequence,
    cfg: TrainerConfig,
    schedule: list[list[Batch]] | None = None,
    on_epoch_end: EpochHook | None = None,
    loss_fn=None,
) -> TrainMetrics:
    """Adam on per-token-mean NLL (or ``loss_fn``), updating ``model`` in place.

    ``schedule`` (one batch list per epoch) replaces the seeded shuffling.
    """
    run = _Run(model, items, cfg, on_epoch_end)
    if schedule is not None and len(schedule) != cfg.epochs:
        raise ConfigError("explicit schedule must provide one batch list per epoch")
    loss_fn = loss_fn or (lambda prepared: _nll)
    for epoch in range(1, cfg.epochs + 1):
        groups = [schedule[epoch - 1]] if schedule is not None else _student_epoch_batches(items, cfg, run.streams.student)
        marks = run.dense_marks(epoch, sum(len(g) for g in groups))
        offset = 0
        for group in groups:
            run.train_batches(epoch, group, loss_fn, marks, offset)
            offset += len(group)
        run.end_epoch(epoch, groups)
    return run.metrics


def cokd_train(
    student,
    items: Sequence,
    cfg: TrainerConfig,
    teachers: list | None = None,
    on_epoch_end: EpochHook | None = None,
) -> TrainMetrics:
    """Complementary online knowledge distillation.

    Each epoch the data is split into ``n + 1`` subsets.  At time step ``t``
    every teacher ``i`` first takes one NLL pass over subset
    ``ordering(i, t, n)``; then the student takes one pass over subset ``t``
    minimising ``alpha * KD(mean teacher) + (1 - alpha) * NLL``.  At epoch end
    the teachers are overwritten with the student (unless ``disable_tr``)
    and their optimizer state is cleared.  ``disable_ct`` gives each teacher
    its own independent random partition instead of the complementary one.
    """
    cfg = replace(cfg, schedule="split")
    run = _Run(student, items, cfg, on_epoch_end)
    streams = run.streams
    if teachers is None:
        teachers = [build_model(student.config, seed=_draw_seed(streams.init)) for _ in range(cfg.n)]
    if len(teachers) != cfg.n:
        raise ConfigError(f"expected {cfg.n} teachers, got {len(teachers)}")
    for t in teachers:
        if not t.params.congruent(student.params):
            raise ConfigError("teacher parameters are not congruent with the student")
    t_states = [AdamState.for_params(t.params, cfg.optim) for t in teachers]
    n = cfg.n
    alpha = cfg.alpha

    for epoch in range(1, cfg.epochs + 1):
        part = partition_epoch(np.arange(len(items)), n, streams.student)
        groups = [make_epoch_batches(items, cfg.batch_tokens, _draw_seed(streams.student), indices=s) for s in part.splits]
        if cfg.disable_ct:
            own_parts = [partition_epoch(np.arange(len(items)), n, streams.teacher) for _ in range(n)]
        consumed: list[list[int]] = [[] for _ in range(n)]
        marks = run.dense_marks(epoch, sum(len(g) for g in groups))
        offset = 0
        for t in range(1, n + 2):
            for i, (teacher, t_state) in enumerate(zip(teachers, t_states), start=1):
                subset = own_parts[i - 1].splits[t - 1] if cfg.disable_ct else part.splits[ordering(i, t, n) - 1]
                for batch in make_epoch_batches(items, cfg.batch_tokens, _draw_seed(streams.teacher), indices=subset):
                    prepared = _prepare(teacher, items, batch)
                    _step(teacher, t_state, prepared, _nll, streams.teacher_dropout, f"epoch {epoch}, teacher {i}, step {t}")
                    consumed[i - 1].extend(batch.indices)

            def loss_fn(prepared):
                probs = _teacher_probs(teachers, prepared)

                def fn(log_probs, prepared):
                    nll = nll_loss(log_probs, prepared.targets, prepared.mask)
                    if alpha == 0.0:
                        return nll
                    kd = multi_teacher_kd_loss(log_probs, probs, prepared.mask)
                    return interpolated_loss(kd, nll, alpha)

                return fn

            run.train_batches(epoch, groups[t - 1], loss_fn, marks, offset)
            offset += len(groups[t - 1])
        run.metrics.teacher_items.append(consumed)
        if not cfg.disable_tr:
            for teacher, t_state in zip(teachers, t_states):
                copy_params(teacher.params, student.params)
                if cfg.teacher_state == "reset":
                    reset_state(t_state)
                elif cfg.teacher_state == "copy":
                    t_state.m = {k: v.copy() for k, v in run.state.m.items()}
                    t_state.v = {k: v.copy() for k, v in run.state.v.items()}
                    t_state.step_count = run.state.step_count
        run.metrics.teachers_equal_student.append(all(t.params.equal(student.params) for t in teachers))
        run.end_epoch(epoch, groups)
    return run.metrics


def word_kd_train(
    student,
    teacher,
    items: Sequence,
    cfg: TrainerConfig,
    on_epoch_end: EpochHook | None = None,
) -> TrainMetrics:
    """Offline word-level KD from a fixed pretrained teacher."""
    alpha = cfg.alpha

    def loss_fn(prepared):
        probs = _teacher_probs([teacher], prepared)

        def fn(log_probs, prepared):
            nll = nll_loss(log_probs, prepared.targets, prepared.mask)
            if alpha == 0.0:
                return nll
            kd = multi_teacher_kd_loss(log_probs, probs, prepared.mask)
            return interpolated_loss(kd, nll, alpha)

        return fn

    return baseline_train(student, items, cfg, on_epoch_end=on_epoch_end, loss_fn=loss_fn)


def finetune_low_lr(
    model,
    items: Sequence,
    cfg: TrainerConfig,
    new_lr: float,
    epochs: int = 1,
    on_epoch_end: EpochHook | None = None,
) -> TrainMetrics:
    """Continue NLL training at ``new_lr`` with a fresh optimizer state."""
    ft_cfg = replace(
        cfg,
        epochs=epochs,
        optim=replace(cfg.optim, lr=new_lr, warmup_steps=0),
        schedule="shuffle",
        dense_checkpoints=0,
        seed=cfg.seed + 7919,
    )
    return baseline_train(model, items, ft_cfg, on_epoch_end=on_epoch_end)
