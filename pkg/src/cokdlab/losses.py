"""Training objectives: NLL, word-level KD, multi-teacher KD and their
alpha interpolation.

All losses take ``[..., V]`` student log-probabilities plus an optional
``mask`` over the leading axes (padding slots contribute nothing).  Values
are sums over tokens; ``LossValue.mean`` gives the per-token mean the
optimizer consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .models import ConfigError
from .nn_core import Tensor

PROB_EPS = 1e-12
_LOG_EPS = np.log(PROB_EPS)


@dataclass
class LossValue:
    value: Tensor
    token_count: int

    @property
    def mean(self) -> Tensor:
        return nn.mul(self.value, 1.0 / self.token_count)

    def item(self) -> float:
        return self.value.item()


def _mask_for(log_probs: Tensor, mask) -> np.ndarray:
    lead = log_probs.shape[:-1]
    if mask is None:
        return np.ones(lead)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != lead:
        raise nn.ShapeError(f"mask shape {mask.shape} does not match {lead}")
    return mask


def _clamped(log_probs: Tensor) -> Tensor:
    # floor log-probs at log(eps); softmax outputs never reach it in practice
    if np.all(log_probs.data >= _LOG_EPS):
        return log_probs
    return nn.clamp_min(log_probs, _LOG_EPS)


def _count(mask: np.ndarray) -> int:
    return max(int(round(mask.sum())), 1)


def nll_loss(log_probs: Tensor, targets, mask=None) -> LossValue:
    """``-sum_t log p(y_t)`` over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = log_probs.shape[-1]
    if targets.shape != log_probs.shape[:-1]:
        raise nn.ShapeError(f"targets {targets.shape} vs log_probs {log_probs.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target outside [0, {vocab})")
    m = _mask_for(log_probs, mask)
    picked = nn.pick(_clamped(log_probs), targets)
    return LossValue(nn.mul(nn.sum(nn.mul(picked, m)), -1.0), _count(m))


def _check_distribution(q: np.ndarray, mask: np.ndarray) -> None:
    if np.any(q < 0):
        raise ValueError("teacher probabilities must be nonnegative")
    sums = q.sum(axis=-1)
    live = mask > 0
    if np.any(np.abs(sums[live] - 1.0) > 1e-6):
        raise ValueError("teacher rows must sum to 1 (tolerance 1e-6)")


def word_kd_loss(student_log_probs: Tensor, teacher_probs, mask=None) -> LossValue:
    """``-sum_t sum_k q(k) log p(k)``; the teacher side is a constant."""
    q = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if q.shape != student_log_probs.shape:
        raise nn.ShapeError(f"teacher {q.shape} vs student {student_log_probs.shape}")
    m = _mask_for(student_log_probs, mask)
    _check_distribution(q, m)
    weights = q * m[..., None]
    return LossValue(nn.mul(nn.sum(nn.mul(_clamped(student_log_probs), weights)), -1.0), _count(m))


def multi_teacher_kd_loss(student_log_probs: Tensor, teacher_probs_list: Sequence, mask=None) -> LossValue:
    """Word-KD against the arithmetic mean of the teachers' distributions."""
    if len(teacher_probs_list) == 0:
        raise ValueError("multi_teacher_kd_loss needs at least one teacher")
    arrays = [q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64) for q in teacher_probs_list]
    if len(arrays) == 1:
        mean_q = arrays[0]
    else:
        mean_q = np.sum(arrays, axis=0) / len(arrays)
        # identical teachers must reproduce the single-teacher loss exactly
        if all(np.array_equal(a, arrays[0]) for a in arrays[1:]):
            mean_q = arrays[0]
    return word_kd_loss(student_log_probs, mean_q, mask)


def interpolated_loss(kd: LossValue, nll: LossValue, alpha: float) -> LossValue:
    """``alpha * kd + (1 - alpha) * nll``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if kd.token_count != nll.token_count:
        raise ValueError("kd and nll were computed over different token counts")
    if alpha == 0.0:
        return nll
    if alpha == 1.0:
        return kd
    value = nn.add(nn.mul(kd.value, alpha), nn.mul(nll.value, 1.0 - alpha))
    return LossValue(value, nll.token_count)
