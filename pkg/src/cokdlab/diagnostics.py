"""Order-vs-loss measurement: per-batch losses of a final model replayed in
the last epoch's batch order, and their Spearman correlation with batch-id.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data_gen import make_epoch_batches
from .losses import nll_loss


@dataclass
class BatchTrace:
    """Batches of one epoch in the order they were trained."""

    entries: list[tuple[int, tuple[int, ...], int]]
    epoch: int

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("batch ids must run 0..B-1 in order")

    @classmethod
    def from_batches(cls, batches, epoch: int) -> "BatchTrace":
        return cls([(b.batch_id, tuple(b.indices), b.token_count) for b in batches], epoch)

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "batches": [{"batch_id": b, "items": list(items), "token_count": n} for b, items, n in self.entries],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "BatchTrace":
        entries = [(int(b["batch_id"]), tuple(int(i) for i in b["items"]), int(b["token_count"])) for b in payload["batches"]]
        return cls(entries, int(payload["epoch"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BatchTrace":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class CorrelationReport:
    rho: float
    per_batch_losses: list[tuple[float, float]]
    model_tag: str = ""
    epoch: int = 0
    token_counts: list[int] = field(default_factory=list, repr=False)

    @property
    def n_batches(self) -> int:
        return len(self.per_batch_losses)

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["normalized_batch_id", "mean_loss"])
            for x, y in self.per_batch_losses:
                writer.writerow([f"{x:.17g}", f"{y:.17g}"])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")

    def summary(self) -> dict:
        return {
            "rho": None if math.isnan(self.rho) else self.rho,
            "n_batches": self.n_batches,
            "model_tag": self.model_tag,
            "epoch": self.epoch,
        }


def read_correlation_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["normalized_batch_id", "mean_loss"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(float(x), float(y)) for x, y in rows[1:]]


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks on ties.

    Returns NaN (never 0) when either series is constant.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-d series of equal length")
    if len(x) < 3:
        raise ValueError("spearman needs at least 3 points")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    denom = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if denom == 0.0:
        return math.nan
    return float(np.clip(np.dot(rx, ry) / denom, -1.0, 1.0))


def per_batch_loss(model, trace: BatchTrace, items: Sequence, return_counts: bool = False):
    """Mean per-token NLL of each traced batch, in trace order, eval mode."""
    losses, counts = [], []
    for batch_id, indices, token_count in trace.entries:
        if indices and max(indices) >= len(items):
            raise ValueError(f"trace batch {batch_id} references item {max(indices)} beyond data of size {len(items)}")
        prepared = model.prepare([items[i] for i in indices])
        if prepared.token_count != token_count:
            raise ValueError(f"trace batch {batch_id} expects {token_count} tokens, data gives {prepared.token_count}")
        loss = nll_loss(model.log_probs(prepared), prepared.targets, prepared.mask)
        losses.append(loss.item() / loss.token_count)
        counts.append(loss.token_count)
    return (losses, counts) if return_counts else losses


def per_item_loss(model, trace: BatchTrace, items: Sequence) -> list[tuple[int, int, float]]:
    """``(batch_id, item_index, mean token NLL)`` for every traced item."""
    rows = []
    for batch_id, indices, _ in trace.entries:
        for i in indices:
            prepared = model.prepare([items[i]])
            loss = nll_loss(model.log_probs(prepared), prepared.targets, prepared.mask)
            rows.append((batch_id, i, loss.item() / loss.token_count))
    return rows


def imbalance_report(model, trace: BatchTrace, items: Sequence, model_tag: str = "") -> CorrelationReport:
    losses, counts = per_batch_loss(model, trace, items, return_counts=True)
    return report_from_losses(losses, trace.epoch, model_tag, counts)


def report_from_losses(losses: Sequence[float], epoch: int = 0, model_tag: str = "", counts=None) -> CorrelationReport:
    b = len(losses)
    denom = max(b - 1, 1)
    xs = [i / denom for i in range(b)]
    # too few batches for a rank correlation: undefined, reported as null
    rho = spearman(list(range(b)), losses) if b >= 3 else math.nan
    return CorrelationReport(rho, list(zip(xs, losses)), model_tag, epoch, list(counts or []))


def heldout_metrics(model, items: Sequence, batch_tokens: int = 2048) -> dict:
    """Teacher-forced per-token NLL and argmax token accuracy."""

    total_nll = 0.0
    correct = 0.0
    tokens = 0
    for batch in make_epoch_batches(items, batch_tokens, None):
        prepared = model.prepare([items[i] for i in batch.indices])
        lp = model.log_probs(prepared).data
        picked = np.take_along_axis(lp, prepared.targets[..., None], axis=-1)[..., 0]
        total_nll -= float(np.sum(picked * prepared.mask))
        correct += float(np.sum((lp.argmax(axis=-1) == prepared.targets) * prepared.mask))
        tokens += prepared.token_count
    return {"nll": total_nll / tokens, "accuracy": correct / tokens}
