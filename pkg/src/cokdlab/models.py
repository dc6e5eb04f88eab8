"""Toy architectures: a one-hidden-layer softmax classifier and a tiny
attention encoder-decoder for synthetic translation.

Both expose ``log_probs(batch)`` returning a ``[B, T, V]`` tensor so the
trainers can treat them uniformly (the classifier uses ``T == 1``).
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import nn_core as nn
from .nn_core import Tensor

BOS = 0
EOS = 1
N_SPECIAL = 2

# attention logit for padded source slots; finite so outputs stay finite
_MASK_LOGIT = -1e9


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class ParamSet(Mapping):
    """Named parameter tensors, iterated in lexicographic name order."""

    def __init__(self, entries: Mapping[str, object] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name in sorted(entries or {}):
            value = entries[name]
            data = value.data if isinstance(value, Tensor) else value
            self._entries[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{list(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({inner})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def congruent(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and self.shapes() == other.shapes()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._entries.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (np.zeros_like(v.data) if v.grad is None else v.grad)
            for k, v in self._entries.items()
        }

    def zero_grad(self) -> None:
        nn.zero_grad(self._entries.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.data.copy() for k, v in self._entries.items()})

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, shapes and values."""
        return self.congruent(other) and all(
            np.array_equal(self[k].data, other[k].data) for k in self
        )

    def max_abs_diff(self, other: "ParamSet") -> float:
        return max(float(np.max(np.abs(self[k].data - other[k].data))) for k in self)


def copy_params(dst: ParamSet, src: ParamSet) -> None:
    """Overwrite ``dst`` values with ``src`` values (no aliasing)."""
    if not dst.congruent(src):
        raise ValueError("copy_params: parameter sets are not congruent")
    for name in src:
        dst[name].data = src[name].data.copy()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


def config_hash(config) -> str:
    payload = json.dumps({"kind": type(config).__name__, **asdict(config)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return nn.mul(x, keep)


@dataclass
class PreparedBatch:
    """Model-ready arrays for one batch; ``mask`` marks real target slots."""

    inputs: dict
    targets: np.ndarray
    mask: np.ndarray
    token_count: int


# ---------------------------------------------------------------- classifier


@dataclass(frozen=True)
class ClassifierConfig:
    input_dim: int
    hidden: int
    classes: int
    dropout: float = 0.0

    def validate(self) -> None:
        if min(self.input_dim, self.hidden, self.classes) <= 0:
            raise ConfigError(f"non-positive dimension in {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


class SoftmaxClassifier:
    kind = "classifier"

    def __init__(self, config: ClassifierConfig, params: ParamSet | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def clone(self) -> "SoftmaxClassifier":
        return SoftmaxClassifier(self.config, self.params.copy())

    def prepare(self, items: Sequence) -> PreparedBatch:
        x = np.array([item[0] for item in items], dtype=np.float64)
        y = np.array([[item[1]] for item in items], dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise nn.ShapeError(f"expected inputs of width {self.config.input_dim}")
        return PreparedBatch({"x": x}, y, np.ones(y.shape), len(items))

    def log_probs(self, batch: PreparedBatch, train: bool = False, rng=None) -> Tensor:
        p = self.params
        h = nn.tanh(nn.add(nn.matmul(Tensor(batch.inputs["x"]), p["W1"]), p["b1"]))
        h = _dropout(h, self.config.dropout, train, rng)
        logits = nn.add(nn.matmul(h, p["W2"]), p["b2"])
        # [B, C] -> [B, 1, C]
        return nn.reshape(nn.log_softmax(logits), (len(batch.targets), 1, self.config.classes))


def forward_classifier(model: SoftmaxClassifier, x) -> np.ndarray:
    """Class probabilities ``[B, C]`` in evaluation mode."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise nn.ShapeError(f"expected [B, {model.config.input_dim}] input, got {x.shape}")
    batch = PreparedBatch({"x": x}, np.zeros((len(x), 1), dtype=np.int64), np.ones((len(x), 1)), len(x))
    return np.exp(model.log_probs(batch).data[:, 0, :])


# ---------------------------------------------------------------- seq2seq


@dataclass(frozen=True)
class Seq2SeqConfig:
    src_vocab: int
    tgt_vocab: int
    dim: int = 32
    hidden: int = 128
    max_len: int = 32
    dropout: float = 0.0

    def validate(self) -> None:
        if min(self.src_vocab, self.tgt_vocab, self.dim, self.hidden, self.max_len) <= 0:
            raise ConfigError(f"non-positive dimension in {self}")
        if self.src_vocab <= N_SPECIAL or self.tgt_vocab <= N_SPECIAL:
            raise ConfigError("vocabularies must hold tokens beyond BOS/EOS")
        if self.dim % 2:
            raise ConfigError("dim must be even (sinusoidal positions)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


class TinySeq2Seq:
    """Single-head attention decoder over source embeddings.

    Step ``t`` queries the source with the embedding of target-prefix token
    ``t`` (plus a fixed sinusoidal position signal), then feeds the attention
    context concatenated with that embedding through a tanh MLP.  Each
    source sentence is terminated by ``EOS`` so the model can locate its end.
    """

    kind = "seq2seq"

    def __init__(self, config: Seq2SeqConfig, params: ParamSet | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self._pos = sinusoidal_positions(config.max_len + 2, config.dim)

    def clone(self) -> "TinySeq2Seq":
        return TinySeq2Seq(self.config, self.params.copy())

    def _check_tokens(self, tokens, vocab: int, what: str) -> None:
        for tok in tokens:
            if not 0 <= tok < vocab:
                raise IndexError(f"{what} token {tok} outside vocabulary of size {vocab}")

    def prepare(self, items: Sequence) -> PreparedBatch:
        """Pad ``(src, tgt)`` pairs; targets are ``tgt + [EOS]``."""
        cfg = self.config
        src_len = max(len(s) for s, _ in items) + 1
        tgt_len = max(len(t) for _, t in items) + 1
        if max(src_len, tgt_len) > cfg.max_len + 1:
            raise ConfigError(f"sentence longer than max_len={cfg.max_len}")
        b = len(items)
        src = np.full((b, src_len), EOS, dtype=np.int64)
        src_mask = np.zeros((b, src_len), dtype=bool)
        tgt_in = np.full((b, tgt_len), EOS, dtype=np.int64)
        tgt_out = np.full((b, tgt_len), EOS, dtype=np.int64)
        mask = np.zeros((b, tgt_len))
        for i, (s, t) in enumerate(items):
            self._check_tokens(s, cfg.src_vocab, "source")
            self._check_tokens(t, cfg.tgt_vocab, "target")
            src[i, : len(s)] = s
            src_mask[i, : len(s) + 1] = True
            tgt_in[i, 0] = BOS
            tgt_in[i, 1 : len(t) + 1] = t
            tgt_out[i, : len(t)] = t
            mask[i, : len(t) + 1] = 1.0
        return PreparedBatch(
            {"src": src, "src_mask": src_mask, "tgt_in": tgt_in},
            tgt_out,
            mask,
            int(mask.sum()),
        )

    def log_probs(self, batch: PreparedBatch, train: bool = False, rng=None) -> Tensor:
        cfg, p = self.config, self.params
        src, src_mask, tgt_in = batch.inputs["src"], batch.inputs["src_mask"], batch.inputs["tgt_in"]
        s_len, t_len = src.shape[1], tgt_in.shape[1]
        xs = nn.add(nn.embedding_lookup(p["E_src"], src), Tensor(np.broadcast_to(self._pos[:s_len], src.shape + (cfg.dim,))))
        ys = nn.add(nn.embedding_lookup(p["E_tgt"], tgt_in), Tensor(np.broadcast_to(self._pos[:t_len], tgt_in.shape + (cfg.dim,))))
        keys = nn.matmul(xs, p["W_k"])
        values = nn.matmul(xs, p["W_v"])
        queries = nn.matmul(ys, p["W_q"])
        scores = nn.mul(nn.matmul(queries, nn.transpose(keys)), 1.0 / math.sqrt(cfg.dim))
        bias = np.where(src_mask[:, None, :], 0.0, _MASK_LOGIT)
        scores = nn.add(scores, Tensor(np.broadcast_to(bias, scores.shape)))
        attn = nn.exp(nn.log_softmax(scores))
        context = nn.matmul(attn, values)
        hidden = nn.tanh(nn.add(nn.matmul(nn.concat([context, ys]), p["W_o"]), p["b_o"]))
        hidden = _dropout(hidden, cfg.dropout, train, rng)
        logits = nn.add(nn.matmul(hidden, p["W_out"]), p["b_out"])
        return nn.log_softmax(logits)


def forward_seq2seq(model: TinySeq2Seq, src: Sequence[int], tgt_prefix: Sequence[int]) -> np.ndarray:
    """Next-token distributions ``[T, |V_t|]`` for a prefix starting with BOS.

    Row ``t`` is the distribution of the token following ``tgt_prefix[:t+1]``.
    """
    tgt_prefix = list(tgt_prefix)
    if not tgt_prefix:
        raise ValueError("tgt_prefix must contain at least the BOS token")
    model._check_tokens(src, model.config.src_vocab, "source")
    model._check_tokens(tgt_prefix, model.config.tgt_vocab, "target")
    t_len = len(tgt_prefix)
    batch = PreparedBatch(
        {
            "src": np.array([list(src) + [EOS]], dtype=np.int64),
            "src_mask": np.ones((1, len(src) + 1), dtype=bool),
            "tgt_in": np.array([tgt_prefix], dtype=np.int64),
        },
        np.zeros((1, t_len), dtype=np.int64),
        np.ones((1, t_len)),
        t_len,
    )
    return np.exp(model.log_probs(batch).data[0])


def greedy_decode(model: TinySeq2Seq, src: Sequence[int], max_len: int) -> list[int]:
    """Argmax rollout; returns the body without BOS/EOS."""
    prefix = [BOS]
    for _ in range(max_len):
        probs = forward_seq2seq(model, src, prefix)[-1]
        tok = int(np.argmax(probs))
        if tok == EOS:
            break
        prefix.append(tok)
    return prefix[1:]


# ---------------------------------------------------------------- init


def param_layout(config) -> dict[str, tuple[tuple[int, ...], int, int]]:
    """name -> (shape, fan_in, fan_out); fans of 0 mark zero-initialised biases."""
    if isinstance(config, ClassifierConfig):
        d, h, c = config.input_dim, config.hidden, config.classes
        return {
            "W1": ((d, h), d, h),
            "b1": ((h,), 0, 0),
            "W2": ((h, c), h, c),
            "b2": ((c,), 0, 0),
        }
    if isinstance(config, Seq2SeqConfig):
        d, h = config.dim, config.hidden
        vs, vt = config.src_vocab, config.tgt_vocab
        return {
            "E_src": ((vs, d), vs, d),
            "E_tgt": ((vt, d), vt, d),
            "W_k": ((d, d), d, d),
            "W_o": ((2 * d, h), 2 * d, h),
            "W_out": ((h, vt), h, vt),
            "W_q": ((d, d), d, d),
            "W_v": ((d, d), d, d),
            "b_o": ((h,), 0, 0),
            "b_out": ((vt,), 0, 0),
        }
    raise ConfigError(f"unknown model config {type(config).__name__}")


def init_params(config, seed: int) -> ParamSet:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    entries = {}
    for name, (shape, fan_in, fan_out) in sorted(param_layout(config).items()):
        entries[name] = glorot_uniform(rng, fan_in, fan_out, shape) if fan_in else np.zeros(shape)
    return ParamSet(entries)


def build_model(config, params: ParamSet | None = None, seed: int = 0):
    if isinstance(config, ClassifierConfig):
        return SoftmaxClassifier(config, params, seed)
    if isinstance(config, Seq2SeqConfig):
        return TinySeq2Seq(config, params, seed)
    raise ConfigError(f"unknown model config {type(config).__name__}")


def config_from_dict(kind: str, values: dict):
    if kind == "classifier":
        return ClassifierConfig(**values)
    if kind == "seq2seq":
        return Seq2SeqConfig(**values)
    raise ConfigError(f"unknown model kind {kind!r}")
