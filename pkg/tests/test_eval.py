import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from adavid.data import SyntheticDatasetSpec, generate_synthetic
from adavid.evaluate import (CSV_HEADER, McqItem, build_mcq_items, frame_sweep_classifier,
                             mcq_accuracy, mcq_eval, resample_frames, retrieval_eval, sweep)
from adavid.flops import schedule_flops, spacetime_layer_flops
from adavid.model import DualEncoder
from adavid.rng import Rng
from adavid.tensor import RejectedInput
from adavid.text import TextConfig
from adavid.train import build_vocab
from adavid.video import EncoderConfig, named_schedule

VIDEO = EncoderConfig(layers=4, width=32, head_dim=8, patch=8, image=16, frames=2,
                      embed_dim=8)


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(SyntheticDatasetSpec(seed=0, frames=2, image=16,
                                                 samples_per_class=4, test_per_class=8))
    vocab = build_vocab(ds)
    text = TextConfig(layers=1, width=16, heads=2, max_len=16, embed_dim=8,
                      vocab_size=len(vocab))
    return ds, DualEncoder.init(VIDEO, text, vocab, seed=0)


def test_mcq_tie_goes_to_lowest_index():
    q = np.array([[1.0, 0.0]])
    c = np.array([[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]])
    assert mcq_accuracy(q, c, [1]) == 1.0
    assert mcq_accuracy(q, c, [2]) == 0.0


def test_mcq_item_validation():
    with pytest.raises(RejectedInput):
        McqItem("q", (3,), 0)
    with pytest.raises(RejectedInput):
        McqItem("q", (3, 4), 2)


def test_random_embeddings_land_in_binomial_band():
    n, k = 1000, 5
    rng = Rng(0)
    q = rng.child("q").normal((n, 8))
    c = rng.child("c").normal((n, k, 8))
    answers = rng.child("a").integers(0, k, size=n)
    lo, hi = stats.binom.interval(0.99, n, 1 / k)
    assert lo / n <= mcq_accuracy(q, c, answers) <= hi / n


def test_untrained_model_is_near_chance(setup):
    ds, model = setup
    items, pool = build_mcq_items(ds, k=5, n_items=1000, seed=1)
    acc = mcq_eval(model, items, named_schedule("d-full", VIDEO), pool)
    lo, hi = stats.binom.interval(0.99, 1000, 0.2)
    assert lo / 1000 <= acc <= hi / 1000


def test_inter_items_use_distinct_classes(setup):
    ds, _ = setup
    items, pool = build_mcq_items(ds, k=5, n_items=50, seed=2)
    for it in items:
        classes = ds.test_labels[list(it.candidates)]
        assert len(set(classes)) == 5
        assert ds.captions[classes[it.answer]] == it.query
    with pytest.raises(RejectedInput):
        build_mcq_items(ds, k=9)


def test_intra_items_use_segments_of_one_video(setup):
    ds, _ = setup
    items, pool = build_mcq_items(ds, n_items=30, mode="intra", seed=3)
    S = ds.spec.long_segments
    assert pool.shape[1] == ds.spec.frames
    for it in items:
        assert len({i // S for i in it.candidates}) == 1
        v, j = divmod(it.candidates[it.answer], S)
        assert ds.captions[ds.sequences[ds.long_test_seq[v]][j]] == it.query


def test_answer_positions_are_spread(setup):
    ds, _ = setup
    items, _ = build_mcq_items(ds, n_items=500, seed=4)
    counts = np.bincount([it.answer for it in items], minlength=5)
    assert stats.chisquare(counts).pvalue > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_is_monotone_in_k(seed):
    rng = Rng(seed)
    q = rng.child("q").normal((12, 6))
    g = rng.child("g").normal((15, 6))
    gt = rng.child("gt").integers(0, 15, size=12)
    r = retrieval_eval(q, g, gt)
    assert r["R@1"] <= r["R@5"] <= r["R@10"]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_invariances(seed):
    rng = Rng(seed)
    q = rng.child("q").normal((10, 5))
    g = rng.child("g").normal((12, 5))
    gt = list(range(10))
    base = retrieval_eval(q, g, gt)
    rot, _ = np.linalg.qr(rng.child("rot").normal((5, 5)))
    assert retrieval_eval(q @ rot, g @ rot, gt) == base
    scale = rng.child("s").uniform(0.5, 3.0, size=(12, 1))
    assert retrieval_eval(q, g * scale, gt) == base


def test_recall_example():
    g = np.eye(10)
    q = np.eye(10)[[0, 1, 2]] + 0.01
    assert retrieval_eval(q, g, [0, 1, 5])["R@1"] == pytest.approx(2 / 3)


def test_recall_errors():
    g = np.eye(10)
    with pytest.raises(KeyError, match="query 1"):
        retrieval_eval(g[:2], g, [0, 10])
    with pytest.raises(RejectedInput):
        retrieval_eval(g[:2], g[:5], [0, 1])


def test_resample_frames():
    clips = np.arange(16)[None, :, None, None, None] * np.ones((2, 16, 1, 2, 2))
    out = resample_frames(clips, 4)
    assert np.array_equal(out[0, :, 0, 0, 0], [0, 5, 10, 15])
    assert resample_frames(clips, 16) is clips


def test_sweep_rows_and_flops(setup):
    ds, model = setup
    res = sweep(model, ds, ["d-full", "d-half", "d-quarter", "d-dec"], [2], n_items=40)
    rows = {r.schedule: r for r in res.rows}
    assert len(res.rows) == 4
    flops = [rows[named_schedule(n, VIDEO).label].flops for n in ("d-full", "d-half",
                                                                   "d-quarter")]
    assert flops[0] > flops[1] > flops[2]
    dec = named_schedule("d-dec", VIDEO)
    assert rows[dec.label].flops == schedule_flops(dec, 2, VIDEO.tokens_per_frame).total
    assert all(0.0 <= r.value <= 1.0 and r.metric == "accuracy" for r in res.rows)
    csv = res.to_csv("h").splitlines()
    assert csv[:2] == ["# config_hash=h", CSV_HEADER] and len(csv) == 6


def test_sweep_is_deterministic(setup):
    ds, model = setup
    a = sweep(model, ds, ["d-full", "d-dec"], [1, 2], n_items=30, seed=5).to_csv("x")
    b = sweep(model, ds, ["d-full", "d-dec"], [1, 2], n_items=30, seed=5).to_csv("x")
    assert a == b


def test_doubling_frames_at_half_width_costs_less():
    for T, N, D in [(4, 196, 768), (8, 196, 768), (2, 16, 64)]:
        assert spacetime_layer_flops(2 * T, N, D // 2) < spacetime_layer_flops(T, N, D)


def test_retrieval_sweep_needs_long_model(setup):
    ds, model = setup
    with pytest.raises(RejectedInput):
        sweep(model, ds, ["d-full"], [8], benchmark="retrieval")


def test_frame_sweep_classifier_rows(setup):
    ds, model = setup
    res = frame_sweep_classifier(model, ds, [2, 4], ["d-full"])
    assert [r.frames for r in res.rows] == [2, 4]
    assert res.rows[0].flops < res.rows[1].flops
    with pytest.raises(RejectedInput):
        frame_sweep_classifier(model, ds, [32], ["d-full"])
