"""Adam with bias correction, operating in place on a ParamSet."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import ConfigError, ParamSet


class TrainingDivergedError(RuntimeError):
    """A non-finite gradient or loss was produced."""


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    warmup_steps: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass
class AdamState:
    config: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: ParamSet, config: AdamConfig | None = None) -> "AdamState":
        config = config or AdamConfig()
        config.validate()
        state = cls(config)
        state.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        state.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        return state

    def current_lr(self) -> float:
        """Learning rate that the *next* step will use."""
        warm = self.config.warmup_steps
        if warm and self.step_count < warm:
            return self.config.lr * (self.step_count + 1) / warm
        return self.config.lr


def reset_state(state: AdamState) -> None:
    for buf in (state.m, state.v):
        for k in buf:
            buf[k] = np.zeros_like(buf[k])
    state.step_count = 0


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    if set(grads) != set(params) or any(grads[k].shape != params[k].shape for k in params):
        raise ValueError("gradients are not congruent with the parameters")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {k!r} at step {state.step_count + 1}")
    cfg = state.config
    if cfg.clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > cfg.clip_norm:
            scale = cfg.clip_norm / total
            grads = {k: g * scale for k, g in grads.items()}
    lr = state.current_lr()
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k in params:
        g = grads[k]
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        params[k].data = params[k].data - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
