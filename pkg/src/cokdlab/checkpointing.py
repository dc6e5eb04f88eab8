"""Checkpoint files, parameter averaging and the averaging experiments.

File layout::

    b"CKPTLAB1"                      8-byte magic
    uint64 little-endian             header length in bytes
    UTF-8 JSON header                {"meta": {...}, "params": [{"name", "shape"}], "sha256": ...}
    float64 little-endian payload    tensors concatenated in manifest order
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diagnostics import CorrelationReport, imbalance_report
from .models import ParamSet, build_model, config_from_dict, config_hash

MAGIC = b"CKPTLAB1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: ParamSet
    epoch: int = 0
    step: int = 0
    run_id: str = ""
    model_config_hash: str = ""
    # kind + constructor fields, so a model can be rebuilt from the file alone
    model_config: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, params: ParamSet | None = None, epoch: int = 0, step: int = 0, run_id: str = "") -> "Checkpoint":
        return cls(
            (params if params is not None else model.params).copy(),
            epoch,
            step,
            run_id,
            config_hash(model.config),
            {"kind": model.kind, **asdict(model.config)},
        )

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "run_id": self.run_id,
            "model_config_hash": self.model_config_hash,
            "model_config": self.model_config,
        }

    def build_model(self):
        if not self.model_config:
            raise CheckpointError("checkpoint carries no model config")
        values = dict(self.model_config)
        kind = values.pop("kind")
        return build_model(config_from_dict(kind, values), params=self.params.copy())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = ckpt.params.arrays()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    header = {
        "meta": ckpt.meta(),
        "params": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + _LEN.pack(len(blob)) + blob + payload)


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = _LEN.unpack(raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[16 + hlen :]
    sizes = [int(np.prod(p["shape"], dtype=np.int64)) for p in header["params"]]
    if len(payload) != 8 * sum(sizes):
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} bytes, expected {8 * sum(sizes)})")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch")
    meta = header["meta"]
    if expected_config_hash is not None and meta["model_config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"{path}: incompatible model config (file {meta['model_config_hash']}, expected {expected_config_hash})"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    entries, offset = {}, 0
    for spec, size in zip(header["params"], sizes):
        entries[spec["name"]] = flat[offset : offset + size].reshape(spec["shape"]).astype(np.float64)
        offset += size
    return Checkpoint(
        ParamSet(entries),
        int(meta["epoch"]),
        int(meta["step"]),
        meta["run_id"],
        meta["model_config_hash"],
        meta.get("model_config", {}),
    )


def average_params(param_sets: Sequence[ParamSet]) -> ParamSet:
    """Elementwise arithmetic mean."""
    if not param_sets:
        raise ValueError("nothing to average")
    first = param_sets[0]
    for p in param_sets[1:]:
        if not p.congruent(first):
            raise ValueError("cannot average incongruent parameter sets")
    if len(param_sets) == 1:
        return first.copy()
    out = {}
    for k in first:
        # sort per element so the result does not depend on input order
        stacked = np.sort(np.stack([p[k].data for p in param_sets]), axis=0)
        mean = stacked.sum(axis=0) / len(param_sets)
        # sum-then-divide can be off by an ulp where all inputs agree
        out[k] = np.where(stacked[0] == stacked[-1], stacked[0], mean)
    return ParamSet(out)


def average_checkpoints(ckpts: Sequence[Checkpoint], k: int | None = None) -> ParamSet:
    """Mean of the last ``k`` checkpoints (all when ``k`` is None)."""
    if not ckpts:
        raise ValueError("nothing to average")
    if k is not None:
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > len(ckpts):
            raise ValueError(f"asked to average {k} checkpoints, only {len(ckpts)} available")
        ckpts = list(ckpts)[-k:]
    hashes = {c.model_config_hash for c in ckpts}
    if len(hashes) > 1:
        raise ValueError(f"checkpoints come from different model configs: {sorted(hashes)}")
    return average_params([c.params for c in ckpts])


def best_vs_average(ckpts: Sequence[Checkpoint], k: int, eval_fn: Callable[[ParamSet], dict]) -> dict:
    """Best single checkpoint vs the average of the last ``k``.

    ``eval_fn`` maps a ParamSet to ``{"nll": ..., "accuracy": ...}``; the best
    single NLL and accuracy are taken independently over all checkpoints.
    """
    if len(ckpts) < k:
        raise ValueError(f"need at least {k} checkpoints, have {len(ckpts)}")
    singles = [eval_fn(c.params) for c in ckpts]
    avg = eval_fn(average_checkpoints(ckpts, k))
    return {
        "k": k,
        "best_nll": min(s["nll"] for s in singles),
        "best_accuracy": max(s["accuracy"] for s in singles),
        "avg_nll": avg["nll"],
        "avg_accuracy": avg["accuracy"],
        "single": singles,
    }


def dense_interval_report(model, snapshots: Sequence[ParamSet], trace, items, model_tag: str = "dense_average") -> CorrelationReport:
    """Imbalance report of the average of intra-epoch snapshots."""
    averaged = build_model(model.config, params=average_params(list(snapshots)))
    return imbalance_report(averaged, trace, items, model_tag)
