import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cokdlab import nn_core as nn
from cokdlab.data_gen import gen_translation, make_epoch_batches
from cokdlab.diagnostics import (
    BatchTrace,
    heldout_metrics,
    imbalance_report,
    per_batch_loss,
    per_item_loss,
    read_correlation_csv,
    report_from_losses,
    spearman,
)
from cokdlab.losses import nll_loss
from cokdlab.models import Seq2SeqConfig, TinySeq2Seq

MODEL = Seq2SeqConfig(src_vocab=12, tgt_vocab=12, dim=8, hidden=8, max_len=8)
ITEMS = gen_translation(1, 12, 12, 80, len_range=(2, 5)).pairs


def _trace(items=ITEMS, budget=40, seed=0, epoch=1):
    return BatchTrace.from_batches(make_epoch_batches(items, budget, seed), epoch)


def _uniform_model():
    model = TinySeq2Seq(MODEL, seed=0)
    model.params["W_out"].data[:] = 0.0
    model.params["b_out"].data[:] = 0.0
    return model


class _Oracle:
    """Wraps a real model's batching but always predicts the reference."""

    def __init__(self):
        self.inner = TinySeq2Seq(MODEL, seed=0)

    def prepare(self, items):
        return self.inner.prepare(items)

    def log_probs(self, prepared, train=False, rng=None):
        with np.errstate(divide="ignore"):
            return nn.Tensor(np.log(np.eye(MODEL.tgt_vocab)[prepared.targets]))


def rank_pearson_oracle(xs, ys):
    """Average-rank Pearson, ranks computed by counting."""

    def ranks(v):
        return [sum(1 for w in v if w < x) + (sum(1 for w in v if w == x) + 1) / 2 for x in v]

    rx, ry = ranks(xs), ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


# ---------------------------------------------------------------- spearman


def test_spearman_hand_values():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(1 - 6 * 4 / (4 * 15), abs=1e-15)


def test_spearman_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(3, 30))
        xs = rng.normal(size=m)
        # integer-valued ys produce ties
        ys = rng.integers(0, 5, size=m).astype(float) if rng.random() < 0.5 else rng.normal(size=m)
        if len(set(ys)) == 1:
            continue
        assert abs(spearman(xs, ys) - rank_pearson_oracle(list(xs), list(ys))) <= 1e-12


def test_spearman_distinct_values_closed_form():
    rng = np.random.default_rng(1)
    for m in (3, 7, 20):
        xs, ys = rng.permutation(m), rng.permutation(m)
        d2 = float(np.sum((xs - ys) ** 2))
        assert spearman(xs, ys) == pytest.approx(1 - 6 * d2 / (m * (m * m - 1)), abs=1e-12)


def test_spearman_constant_input_is_nan_not_zero():
    assert math.isnan(spearman([1, 2, 3], [5, 5, 5]))
    assert math.isnan(spearman([4, 4, 4], [1, 2, 3]))


@pytest.mark.parametrize("xs,ys", [([1, 2], [1, 2]), ([1, 2, 3], [1, 2]), ([[1, 2, 3]], [[1, 2, 3]])])
def test_spearman_bad_input(xs, ys):
    with pytest.raises(ValueError):
        spearman(xs, ys)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=25), st.integers(0, 2**31))
def test_spearman_symmetric_and_monotone_invariant(ys, seed):
    xs = list(np.random.default_rng(seed).normal(size=len(ys)))
    rho = spearman(xs, ys)
    if math.isnan(rho):
        assert len(set(ys)) == 1
        return
    assert -1.0 <= rho <= 1.0
    assert abs(rho - spearman(ys, xs)) <= 1e-12
    # strictly monotone maps leave ranks, hence rho, unchanged
    assert abs(rho - spearman(np.exp(np.asarray(xs) / 10), ys)) <= 1e-12
    assert abs(rho - spearman(xs, [y**3 + y for y in ys])) <= 1e-12


def test_shuffled_losses_are_uncorrelated():
    rng = np.random.default_rng(0)
    ids = list(range(1000))
    hits = sum(abs(spearman(ids, rng.permutation(1000))) < 0.1 for _ in range(300))
    assert hits / 300 > 0.99


# ---------------------------------------------------------------- per-batch losses


def test_uniform_model_batches_cost_log_v():
    losses = per_batch_loss(_uniform_model(), _trace(), ITEMS)
    np.testing.assert_allclose(losses, math.log(MODEL.tgt_vocab), rtol=0, atol=1e-12)


def test_perfect_model_batches_cost_zero():
    assert per_batch_loss(_Oracle(), _trace(), ITEMS) == [0.0] * len(_trace())


def test_token_weighted_batch_losses_give_corpus_nll():
    model = TinySeq2Seq(MODEL, seed=4)
    losses, counts = per_batch_loss(model, _trace(), ITEMS, return_counts=True)
    total = sum(l * c for l, c in zip(losses, counts))
    prepared = model.prepare(ITEMS)
    whole = nll_loss(model.log_probs(prepared), prepared.targets, prepared.mask).item()
    assert abs(total - whole) <= 1e-9


def test_per_item_losses_cover_trace():
    model = TinySeq2Seq(MODEL, seed=4)
    trace = _trace()
    rows = per_item_loss(model, trace, ITEMS)
    assert sorted(i for _, i, _ in rows) == list(range(len(ITEMS)))
    assert [b for b, _, _ in rows] == sorted(b for b, _, _ in rows)


def test_trace_data_mismatch_raises():
    trace = _trace()
    with pytest.raises(ValueError):
        per_batch_loss(_uniform_model(), trace, ITEMS[:10])
    # same size, different sentences: token counts disagree
    other = gen_translation(2, 12, 12, 80, len_range=(6, 7)).pairs
    with pytest.raises(ValueError):
        per_batch_loss(_uniform_model(), trace, other)


def test_trace_requires_ordered_ids():
    with pytest.raises(ValueError):
        BatchTrace([(1, (0,), 2), (0, (1,), 2)], 1)


def test_trace_json_round_trip(tmp_path):
    trace = _trace(epoch=7)
    path = tmp_path / "trace.json"
    trace.save(path)
    back = BatchTrace.load(path)
    assert back.entries == trace.entries and back.epoch == 7


# ---------------------------------------------------------------- reports


def test_decreasing_losses_give_minus_one():
    report = report_from_losses([5.0, 4.0, 3.5, 1.0, 0.2], epoch=3, model_tag="x")
    assert report.rho == -1.0
    assert [x for x, _ in report.per_batch_losses] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_too_few_batches_give_null_rho(tmp_path):
    report = report_from_losses([1.0, 2.0])
    assert math.isnan(report.rho)
    report.write(tmp_path / "c.csv", tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text())["rho"] is None


def test_report_is_self_consistent(tmp_path):
    model = TinySeq2Seq(MODEL, seed=2)
    trace = _trace(epoch=4)
    report = imbalance_report(model, trace, ITEMS, "final")
    assert report.n_batches == len(trace)
    report.write(tmp_path / "c.csv", tmp_path / "c.json")
    rows = read_correlation_csv(tmp_path / "c.csv")
    assert spearman([x for x, _ in rows], [y for _, y in rows]) == report.rho
    assert [y for _, y in rows] == per_batch_loss(model, trace, ITEMS)
    sidecar = json.loads((tmp_path / "c.json").read_text())
    assert sidecar == {"rho": report.rho, "n_batches": len(trace), "model_tag": "final", "epoch": 4}


def test_csv_format(tmp_path):
    report_from_losses([0.1, 1 / 3, 2.0]).write(tmp_path / "c.csv")
    raw = (tmp_path / "c.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "normalized_batch_id,mean_loss"
    assert lines[2] == "0.5,0.33333333333333331"


def test_untrained_models_show_no_order_effect():
    items = gen_translation(3, 12, 12, 400, len_range=(2, 5)).pairs
    rhos = []
    for seed in range(3):
        trace = _trace(items, budget=16, seed=seed)
        assert len(trace) > 100
        rhos.append(imbalance_report(TinySeq2Seq(MODEL, seed=seed), trace, items).rho)
    assert np.median(np.abs(rhos)) < 0.15, rhos


def test_heldout_metrics_of_uniform_and_perfect_models():
    uniform = heldout_metrics(_uniform_model(), ITEMS)
    assert uniform["nll"] == pytest.approx(math.log(12), abs=1e-12)
    perfect = heldout_metrics(_Oracle(), ITEMS)
    assert perfect == {"nll": 0.0, "accuracy": 1.0}


def test_rank_oracle_agrees_on_all_small_permutations():
    for perm in itertools.permutations(range(5)):
        assert abs(spearman(range(5), perm) - rank_pearson_oracle(list(range(5)), list(perm))) <= 1e-12
