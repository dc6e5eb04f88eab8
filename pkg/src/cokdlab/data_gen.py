"""Seeded synthetic tasks, epoch batching and corpus text I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import BOS, N_SPECIAL, ConfigError

Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass
class Lexicon:
    """Source->target token rules.

    Tokens outside ``context_tokens`` translate through ``base``.  Context
    tokens translate through ``context_table[(prev_class, token)]`` where
    ``prev_class = prev_class_of[previous source token]`` (BOS at position 0).
    """

    base: dict[int, int]
    context_tokens: frozenset[int]
    prev_class_of: dict[int, int]
    context_table: dict[tuple[int, int], int]

    @property
    def rule_table_size(self) -> int:
        return len(self.base) + len(self.context_table)

    def map_token(self, prev: int, tok: int) -> int:
        if tok in self.context_tokens:
            return self.context_table[(self.prev_class_of[prev], tok)]
        return self.base[tok]

    def translate(self, src: Sequence[int]) -> tuple[int, ...]:
        prevs = (BOS,) + tuple(src[:-1])
        return tuple(self.map_token(p, s) for p, s in zip(prevs, src))


@dataclass
class ParallelCorpus:
    pairs: list[Pair]
    src_vocab: int
    tgt_vocab: int
    seed: int | None = None
    lexicon: Lexicon | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class LabeledDataset:
    items: list[tuple[np.ndarray, int]]
    classes: int
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Batch:
    batch_id: int
    indices: tuple[int, ...]
    token_count: int


def make_lexicon(
    rng: np.random.Generator,
    src_vocab: int,
    tgt_vocab: int,
    rule_noise: float,
    context_classes: int | None = None,
) -> Lexicon:
    src_content = list(range(N_SPECIAL, src_vocab))
    tgt_content = np.arange(N_SPECIAL, tgt_vocab)
    relabel = rng.permutation(tgt_content)[: len(src_content)]
    n_context = int(round(rule_noise * len(src_content)))
    context = sorted(int(t) for t in rng.choice(src_content, size=n_context, replace=False))
    base = {s: int(t) for s, t in zip(src_content, relabel) if s not in context}
    prevs = [BOS] + src_content
    if context_classes is None:
        prev_class_of = {p: i for i, p in enumerate(prevs)}
        n_classes = len(prevs)
    else:
        prev_class_of = {p: int(c) for p, c in zip(prevs, rng.integers(0, context_classes, len(prevs)))}
        n_classes = context_classes
    table = {}
    for tok in context:
        outs = rng.choice(tgt_content, size=n_classes)
        for cls in range(n_classes):
            table[(cls, tok)] = int(outs[cls])
    return Lexicon(base, frozenset(context), prev_class_of, table)


def gen_translation(
    seed: int,
    src_vocab: int,
    tgt_vocab: int,
    n_pairs: int,
    len_range: tuple[int, int] = (4, 8),
    rule_noise: float = 0.5,
    context_classes: int | None = None,
) -> ParallelCorpus:
    """Random source strings translated token-wise through a seeded lexicon.

    A fraction ``rule_noise`` of source tokens translate depending on the
    preceding source token, so the task holds many rarely seen rules.
    Source sentences are distinct.
    """
    lo, hi = len_range
    if src_vocab < 8 or tgt_vocab < 8:
        raise ConfigError("vocabularies must have at least 8 entries")
    if tgt_vocab < src_vocab:
        raise ConfigError("tgt_vocab must be >= src_vocab for a bijective base lexicon")
    if n_pairs < 10:
        raise ConfigError("n_pairs must be at least 10")
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad len_range {len_range}")
    if not 0.0 <= rule_noise <= 1.0:
        raise ConfigError("rule_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    lexicon = make_lexicon(rng, src_vocab, tgt_vocab, rule_noise, context_classes)
    n_content = src_vocab - N_SPECIAL
    capacity = sum(n_content**k for k in range(lo, hi + 1))
    if capacity < n_pairs:
        raise ConfigError("len_range/vocab too small for that many distinct sentences")
    seen: set[tuple[int, ...]] = set()
    pairs: list[Pair] = []
    while len(pairs) < n_pairs:
        length = int(rng.integers(lo, hi + 1))
        src = tuple(int(t) for t in rng.integers(N_SPECIAL, src_vocab, size=length))
        if src in seen:
            continue
        seen.add(src)
        pairs.append((src, lexicon.translate(src)))
    return ParallelCorpus(pairs, src_vocab, tgt_vocab, seed, lexicon)


def split_corpus(corpus: ParallelCorpus, held_out: float = 0.05):
    """Disjoint train/valid/test splits (default 90/5/5)."""
    m = int(round(held_out * len(corpus)))
    n_train = len(corpus) - 2 * m
    if n_train < 1 or m < 1:
        raise ConfigError("corpus too small to split")

    def part(pairs):
        return ParallelCorpus(pairs, corpus.src_vocab, corpus.tgt_vocab, corpus.seed, corpus.lexicon)

    p = corpus.pairs
    return part(p[:n_train]), part(p[n_train : n_train + m]), part(p[n_train + m :])


def gen_classification(seed: int, classes: int, dim: int, n_items: int, spread: float) -> LabeledDataset:
    """Gaussian clusters around seeded class means; classes exactly balanced."""
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if dim < 1 or n_items < classes or spread < 0:
        raise ConfigError("bad classification config")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, dim))
    labels = rng.permutation(np.arange(n_items) % classes)
    points = means[labels] + spread * rng.normal(size=(n_items, dim))
    return LabeledDataset([(points[i], int(labels[i])) for i in range(n_items)], classes, seed)


def split_dataset(data: LabeledDataset, held_out: float = 0.05):
    m = int(round(held_out * len(data)))
    n_train = len(data) - 2 * m
    if n_train < 1 or m < 1:
        raise ConfigError("dataset too small to split")

    def part(items):
        return LabeledDataset(items, data.classes, data.seed)

    it = data.items
    return part(it[:n_train]), part(it[n_train : n_train + m]), part(it[n_train + m :])


def subsample(corpus: ParallelCorpus, k: int, seed: int) -> ParallelCorpus:
    if not 0 < k <= len(corpus):
        raise ValueError(f"cannot draw {k} pairs from a corpus of {len(corpus)}")
    idx = np.random.default_rng(seed).choice(len(corpus), size=k, replace=False)
    pairs = [corpus.pairs[i] for i in idx]
    return ParallelCorpus(pairs, corpus.src_vocab, corpus.tgt_vocab, corpus.seed, corpus.lexicon)


def item_tokens(item) -> int:
    """Target tokens an item contributes to the loss (EOS included)."""
    target = item[1]
    if isinstance(target, (int, np.integer)):
        return 1
    return len(target) + 1


def make_epoch_batches(
    items: Sequence,
    batch_tokens: int,
    epoch_seed: int | None,
    indices: Sequence[int] | None = None,
) -> list[Batch]:
    """Shuffle (by ``epoch_seed``) and greedily pack into token-bounded batches.

    ``indices`` restricts batching to a subset of ``items``; batch members are
    always reported as indices into ``items``.  ``epoch_seed=None`` keeps the
    given order.
    """
    order = np.arange(len(items)) if indices is None else np.asarray(indices, dtype=np.int64)
    if epoch_seed is not None:
        order = np.random.default_rng(epoch_seed).permutation(order)
    batches: list[Batch] = []
    current: list[int] = []
    used = 0
    for i in order:
        n = item_tokens(items[i])
        if n > batch_tokens:
            raise ConfigError(f"item with {n} tokens exceeds batch budget {batch_tokens}")
        if used + n > batch_tokens and current:
            batches.append(Batch(len(batches), tuple(current), used))
            current, used = [], 0
        current.append(int(i))
        used += n
    if current:
        batches.append(Batch(len(batches), tuple(current), used))
    return batches


def dump_corpus(pairs: Sequence[Pair], path) -> None:
    lines = [
        " ".join(map(str, s)) + "\t" + " ".join(map(str, t)) for s, t in pairs
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_corpus(path) -> list[Pair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            src, tgt = line.split("\t")
            pairs.append((tuple(int(t) for t in src.split()), tuple(int(t) for t in tgt.split())))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed corpus line") from exc
    return pairs


def dump_dataset(items, path) -> None:
    lines = [" ".join(f"{v:.17g}" for v in x) + f"\t{y}" for x, y in items]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_dataset(path) -> list[tuple[np.ndarray, int]]:
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            x, y = line.split("\t")
            items.append((np.array([float(v) for v in x.split()]), int(y)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed dataset line") from exc
    return items
