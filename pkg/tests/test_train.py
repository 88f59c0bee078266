import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from adavid import io
from adavid import tensor as T
from adavid.aggregator import AggregatorConfig
from adavid.data import SyntheticDatasetSpec, generate_synthetic
from adavid.layers import LayerParams, adaptive_layer_forward, parameters
from adavid.model import DualEncoder
from adavid.rng import Rng
from adavid.tensor import RejectedInput, Tensor
from adavid.text import TextConfig, Vocab, encode_text, tokenize_batch
from adavid.train import (AdamW, TrainConfig, _class_batches, build_vocab, cache_features,
                          info_nce, sample_schedule, trace_csv, train_aggregator,
                          train_encoder)
from adavid.video import DimSchedule, EncoderConfig, encode, flatten_patches

# gradient-check geometry: L=2, D=16, 8 heads of size 2 at full width, T=2, N=4
TINY_VIDEO = EncoderConfig(layers=2, width=16, head_dim=2, patch=8, image=16, frames=2,
                           embed_dim=8)
SMALL_AGG = AggregatorConfig(layers=2, width=32, heads=2, max_segments=8, embed_dim=8)


def tiny_text(vocab):
    return TextConfig(layers=1, width=16, heads=2, max_len=16, embed_dim=8,
                      vocab_size=len(vocab))


def tiny_dataset(seed=0, frames=2, image=16):
    return generate_synthetic(SyntheticDatasetSpec(seed=seed, frames=frames, image=image,
                                                   samples_per_class=4, test_per_class=2))


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ------------------------------------------------------------------ AdamW
def adamw_reference(x0, grad_fn, lr, wd, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop AdamW written from the update rule."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(np.array(x))
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            x[i] = x[i] * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)
        path.append(list(x))
    return np.array(path)


def test_adamw_matches_reference_on_quadratic():
    A = np.diag([1.0, 3.0, 0.5])
    c = np.array([1.0, -2.0, 0.25])
    x = Tensor(np.array([0.3, 0.7, -1.2]), requires_grad=True)
    opt = AdamW([x], lr=0.05, weight_decay=0.0)
    got = []
    for _ in range(50):
        opt.zero_grad()
        d = x - Tensor(c)
        T.backward((d * (Tensor(A) @ d.reshape(3, 1)).reshape(3)).sum() * 0.5)
        opt.step()
        got.append(x.data.copy())
    want = adamw_reference([0.3, 0.7, -1.2], lambda z: A @ (z - c), 0.05, 0.0, 50)
    assert np.allclose(np.array(got), want, rtol=0, atol=1e-12)


def test_adamw_with_decay_matches_reference():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = AdamW([x], lr=0.1, weight_decay=0.5)
    got = []
    for _ in range(20):
        opt.zero_grad()
        T.backward((x * x).sum())
        opt.step()
        got.append(x.data.copy())
    want = adamw_reference([2.0, -1.0], lambda z: 2 * z, 0.1, 0.5, 20)
    assert np.allclose(np.array(got), want, rtol=0, atol=1e-12)


def test_decay_is_decoupled_from_moments():
    # linear loss: the gradient does not depend on x, so the moments must not
    # depend on the decay setting either
    runs = {}
    for wd in (0.0, 0.3):
        x = Tensor(np.array([1.5, -0.5, 4.0]), requires_grad=True)
        opt = AdamW([x], lr=0.01, weight_decay=wd)
        for _ in range(10):
            opt.zero_grad()
            T.backward((x * Tensor(np.array([1.0, -2.0, 0.5]))).sum())
            opt.step()
        runs[wd] = opt
    assert np.array_equal(runs[0.0].m[0], runs[0.3].m[0])
    assert np.array_equal(runs[0.0].v[0], runs[0.3].v[0])


def test_adamw_skips_parameters_without_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW([x], lr=0.1, weight_decay=0.1)
    opt.step()
    assert np.array_equal(x.data, np.ones(2))


# ------------------------------------------------------------------ InfoNCE
def test_info_nce_identical_embeddings_is_log_batch():
    e = Tensor(np.tile(unit_rows(np.ones((1, 5))), (4, 1)))
    assert abs(info_nce(e, e, 0.05).item() - math.log(4)) < 1e-12


def test_info_nce_orthogonal_pair():
    e = Tensor(np.eye(2))
    want = math.log(1 + math.exp(-20))
    assert abs(info_nce(e, e, 0.05).item() - want) < 1e-12


def test_info_nce_single_pair_is_zero():
    e = Tensor(np.array([[0.6, 0.8]]))
    assert info_nce(e, e, 0.05).item() == 0.0


def test_info_nce_rejects_bad_input():
    u = Tensor(unit_rows(np.ones((2, 3))))
    with pytest.raises(RejectedInput, match="unit-norm"):
        info_nce(Tensor(np.ones((2, 3))), u, 0.05)
    with pytest.raises(RejectedInput):
        info_nce(u, u, 0.0)
    with pytest.raises(RejectedInput):
        info_nce(u, Tensor(unit_rows(np.ones((3, 3)))), 0.05)


def test_info_nce_gradient():
    rng = Rng(0)
    a = Tensor(rng.child("a").normal((4, 6)), requires_grad=True)
    b = Tensor(rng.child("b").normal((4, 6)), requires_grad=True)
    f = lambda: info_nce(T.l2_normalize(a), T.l2_normalize(b), 0.05)
    assert T.grad_check(f, [a, b]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_info_nce_is_symmetric_in_the_two_towers(B, seed):
    rng = Rng(seed)
    v = Tensor(unit_rows(rng.child("v").normal((B, 4))))
    t = Tensor(unit_rows(rng.child("t").normal((B, 4))))
    assert abs(info_nce(v, t, 0.1).item() - info_nce(t, v, 0.1).item()) < 1e-12


# ------------------------------------------------------------------ schedules
@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["decreasing", "increasing", "unconstrained"]), st.integers(0, 10**6))
def test_sampled_schedules_are_valid(strategy, seed):
    cfg = EncoderConfig(layers=12)
    w = np.array(sample_schedule(strategy, cfg, Rng(seed)).widths)
    assert len(w) == 12 and set(w) <= set(cfg.allowed_widths)
    if strategy == "decreasing":
        assert np.all(np.diff(w) <= 0)
    if strategy == "increasing":
        assert np.all(np.diff(w) >= 0)


def test_single_allowed_width_gives_constant_schedule():
    cfg = EncoderConfig(layers=6)
    for strategy in ("decreasing", "increasing", "unconstrained"):
        assert sample_schedule(strategy, cfg, Rng(1), allowed=[64]).widths == (64,) * 6
    with pytest.raises(RejectedInput):
        sample_schedule("decreasing", cfg, Rng(1), allowed=[40])


def test_fixed_and_unknown_strategies():
    cfg = EncoderConfig()
    assert sample_schedule("fixed:d-half", cfg, Rng(0)).widths == (32,) * 8
    with pytest.raises(RejectedInput):
        sample_schedule("random", cfg, Rng(0))
    with pytest.raises(RejectedInput):
        TrainConfig(strategy="random")


def test_decreasing_first_layer_follows_max_law():
    # layer 1 of a sorted i.i.d. draw is the maximum of L uniform picks over
    # the 4 widths: P(max <= k-th smallest) = (k/4)^L
    cfg = EncoderConfig(layers=4)
    rng = Rng(7)
    n = 20_000
    firsts = [sample_schedule("decreasing", cfg, rng).widths[0] for _ in range(n)]
    ordered = sorted(cfg.allowed_widths)
    observed = np.array([firsts.count(w) for w in ordered])
    cdf = np.array([((k + 1) / 4) ** 4 for k in range(4)])
    expected = n * np.diff(np.concatenate([[0.0], cdf]))
    assert stats.chisquare(observed, expected).pvalue > 1e-3


def test_class_batches_hold_distinct_labels():
    labels = np.repeat(np.arange(5), 3)
    gen = _class_batches(labels, 4, Rng(0))
    for _ in range(50):
        idx = next(gen)
        assert len(idx) == 4 and len(set(labels[idx])) == 4
    with pytest.raises(RejectedInput, match="exceeds"):
        next(_class_batches(labels, 6, Rng(0)))


# ------------------------------------------------------------- encoder training
def tiny_train(seed=0, steps=3, strategy="unconstrained", lr=1e-3):
    ds = tiny_dataset(seed)
    vocab = build_vocab(ds)
    cfg = TrainConfig(batch_size=4, steps=steps, lr=lr, seed=seed, strategy=strategy)
    return train_encoder(cfg, ds, TINY_VIDEO, tiny_text(vocab))


def test_training_is_deterministic():
    m1, t1 = tiny_train(seed=3)
    m2, t2 = tiny_train(seed=3)
    assert t1 == t2
    assert all(np.array_equal(a, b) for a, b in zip(m1.tensors().values(),
                                                     m2.tensors().values()))
    _, t3 = tiny_train(seed=4)
    assert t3 != t1


def vanilla_video(p, cfg, clips):
    """Full-width video encoder with no schedule, slicing or width transitions."""
    patches = Tensor(flatten_patches(clips, cfg.patch))
    B, t_, n_, _ = patches.shape
    D = cfg.width
    x = patches @ p.patch_proj.weight.T + p.patch_proj.bias
    x = x + p.pos_space[:n_] + p.pos_time[:t_].reshape(t_, 1, D)
    x = T.concat([T.broadcast_to(p.cls, (B, 1, D)), x.reshape(B, t_ * n_, D)], axis=1)
    for layer in p.layers:
        x = adaptive_layer_forward(layer, x, D, "space-time", (t_, n_))
    x = T.layer_norm(x, p.final_norm.gamma, p.final_norm.beta, p.final_norm.eps)
    return T.l2_normalize(x[:, 0, :] @ p.head.weight.T + p.head.bias)


def vanilla_trainer(config, ds, video_config, text_config):
    rng = Rng(config.seed)
    vocab = build_vocab(ds)
    model = DualEncoder.init(video_config, text_config, vocab, seed=rng.child("init").seed)
    opt = AdamW(parameters(model.video) + parameters(model.text), config.lr,
                config.weight_decay)
    ids, mask = tokenize_batch(ds.captions, vocab, text_config.max_len)
    batches = _class_batches(ds.train_labels, config.batch_size, rng.child("batches"))
    losses = []
    for _ in range(config.steps):
        idx = next(batches)
        lab = ds.train_labels[idx]
        v = vanilla_video(model.video, video_config, ds.train_clips[idx])
        t = encode_text(model.text, text_config, ids[lab], mask[lab])
        loss = info_nce(v, t, config.temperature)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


def test_fixed_full_width_is_vanilla_training():
    ds = tiny_dataset(2)
    vocab = build_vocab(ds)
    cfg = TrainConfig(batch_size=4, steps=6, lr=1e-3, seed=2, strategy="fixed:d-full")
    _, trace = train_encoder(cfg, ds, TINY_VIDEO, tiny_text(vocab))
    assert [loss for _, _, loss in trace] == vanilla_trainer(cfg, ds, TINY_VIDEO,
                                                             tiny_text(vocab))


def train_step_loss(model, clips, ids, mask, schedule):
    v = encode(model.video, model.video_config, clips, schedule)
    t = encode_text(model.text, model.text_config, ids, mask)
    return info_nce(v, t, 0.05)


@pytest.mark.parametrize("widths", [(16, 16), (16, 8), (4, 12)])
def test_end_to_end_gradient(widths):
    ds = tiny_dataset(1)
    vocab = build_vocab(ds)
    model = DualEncoder.init(TINY_VIDEO, tiny_text(vocab), vocab, seed=5)
    idx = np.array([0, 4])  # two different classes
    ids, mask = tokenize_batch([ds.captions[k] for k in ds.train_labels[idx]], vocab, 16)
    params = parameters(model.video) + parameters(model.text)
    f = lambda: train_step_loss(model, ds.train_clips[idx], ids, mask, DimSchedule(widths))
    assert T.grad_check(f, params, max_entries=8) < 1e-4


@pytest.mark.parametrize("d", [16, 8])
def test_head_dim_eight_layer_gradient(d):
    # width 16 with head size 8: one or two heads, both routings
    p = LayerParams.init(Rng(9), 16, 8, mode="space-time")
    x = Tensor(Rng(10).normal((2, 1 + 2 * 4, d)), requires_grad=True)
    c = Tensor(Rng(11).normal((2, 1 + 2 * 4, d)))
    f = lambda: (adaptive_layer_forward(p, x, d, "space-time", (2, 4)) * c).mean()
    assert T.grad_check(f, parameters(p) + [x], max_entries=10) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_initial_loss_near_log_batch(seed):
    ds = generate_synthetic(SyntheticDatasetSpec(seed=seed))
    _, trace = train_encoder(TrainConfig(steps=1, seed=seed), ds)
    assert abs(trace[0][2] - math.log(8)) <= 0.1 * math.log(8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_hundred_steps_reduce_loss(seed):
    ds = generate_synthetic(SyntheticDatasetSpec(seed=seed))
    cfg = TrainConfig(steps=200, lr=1e-3, seed=seed, strategy="decreasing")
    _, trace = train_encoder(cfg, ds)
    losses = np.array([loss for _, _, loss in trace])
    assert losses[-20:].mean() < losses[0]


def test_trace_csv_layout():
    text = trace_csv([(0, "d-64x8", 2.0), (1, "d-64x8", 1.5)], "abc", 7)
    assert text.splitlines() == ["# config_hash=abc seed=7", "step,schedule,loss",
                                 "0,d-64x8,2.0", "1,d-64x8,1.5"]


# ------------------------------------------------------------------ aggregator
def encoder_hash(model):
    return hashlib.sha256(io.checkpoint_bytes(model.config(), model.tensors())).hexdigest()


@pytest.fixture(scope="module")
def long_setup():
    ds = generate_synthetic(SyntheticDatasetSpec(seed=0, frames=2, image=16))
    vocab = build_vocab(ds)
    enc = DualEncoder.init(TINY_VIDEO, tiny_text(vocab), vocab, seed=0)
    feats = cache_features(enc, ds.long_train, 4, ["d-full", "d-quarter"])
    return ds, enc, feats


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_aggregator_loss_decreases(long_setup, seed):
    ds, enc, feats = long_setup
    before = encoder_hash(enc)
    cfg = TrainConfig(steps=200, lr=1e-3, seed=seed)
    _, trace = train_aggregator(cfg, feats, ds.long_train_seq, ds.summaries, enc, SMALL_AGG)
    losses = np.array([loss for _, _, loss in trace])
    assert losses[-20:].mean() < losses[:20].mean()
    assert encoder_hash(enc) == before


def test_aggregator_fits_separable_features(long_setup):
    ds, enc, _ = long_setup
    n = 8
    feats = {"d-full": unit_rows(Rng(3).normal((n * 4, 8))).reshape(n, 4, 8)}
    cfg = TrainConfig(batch_size=8, steps=500, lr=1e-3, seed=0)
    _, trace = train_aggregator(cfg, feats, np.arange(n), ds.summaries[:n], enc, SMALL_AGG)
    assert trace[-1][2] < 0.1


def test_mean_pool_baseline_trains_only_text(long_setup):
    ds, enc, feats = long_setup
    cfg = TrainConfig(steps=5, lr=1e-3, seed=0)
    model, trace = train_aggregator(cfg, feats, ds.long_train_seq, ds.summaries, enc,
                                    SMALL_AGG, pooling="mean")
    assert model.agg is None and len(trace) == 5


def test_aggregator_reports_missing_cache_entries(long_setup):
    ds, enc, feats = long_setup
    short = {"d-full": feats["d-full"][:3]}
    with pytest.raises(KeyError, match=r"d-full:3.*d-full:4"):
        train_aggregator(TrainConfig(steps=1), short, np.arange(5), ds.summaries[:5], enc,
                         SMALL_AGG)
    with pytest.raises(RejectedInput):
        train_aggregator(TrainConfig(steps=1), {}, np.arange(5), ds.summaries[:5], enc)
    with pytest.raises(RejectedInput, match="exceeds"):
        train_aggregator(TrainConfig(steps=1), short, np.arange(3), ds.summaries[:3], enc,
                         SMALL_AGG)


def test_cache_features_shape_and_segment_split(long_setup):
    ds, enc, feats = long_setup
    assert feats["d-full"].shape == (len(ds.long_train), 4, 8)
    seg = ds.long_train[0, 2:4]
    want = enc.embed_videos(seg[None], DimSchedule((16, 16)))[0]
    assert np.allclose(feats["d-full"][0, 1], want, atol=1e-14)
    with pytest.raises(RejectedInput):
        cache_features(enc, ds.long_train[:, :6], 4, ["d-full"])
