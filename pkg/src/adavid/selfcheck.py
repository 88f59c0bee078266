"""Invariant suite behind ``adavid selfcheck``.

Each check returns ``(ok, detail)``; :func:`run_selfcheck` prints one PASS or
FAIL line per check and returns whether all passed. Oracles come from
:mod:`adavid.reference`, never from the code under test.
"""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
import time

import numpy as np
from scipy import stats

from . import io
from . import reference as R
from . import tensor as T
from .aggregator import AggregatorConfig, AggregatorParams, aggregate
from .data import SyntheticDatasetSpec, generate_synthetic
from .evaluate import mcq_accuracy, retrieval_eval
from .flops import (TABLE1, dense_layer_flops, ffn_flops, hier_layer_flops, instrumented_run,
                    mha_flops, spacetime_layer_flops, table1)
from .layers import (FFNParams, LayerNormParams, LayerParams, LinearParams, MHAParams,
                     adaptive_ffn, adaptive_layer_forward, adaptive_layernorm, adaptive_linear,
                     adaptive_mha, named_parameters, parameters, transition)
from .model import DualEncoder
from .rng import Rng
from .tensor import Tensor
from .text import TextConfig, TextEncoderParams, Vocab, encode_text, tokenize_batch
from .train import AdamW, TrainConfig, info_nce, sample_schedule, train_aggregator
from .video import (SCHEDULE_PATTERNS, DimSchedule, EncoderConfig, VideoEncoderParams, encode,
                    full_schedule, named_schedule)

CHECKS = []


def check(name):
    def register(fn):
        CHECKS.append((name, fn))
        return fn
    return register


# ------------------------------------------------------------ criteria 1-6
@check("table1: closed form within 1% of all ten published totals")
def check_table1(tol=0.01):
    rows = table1()
    bad = [f"{r['name']} {r['flops'] / 1e10:.4f} vs {r['published_e10']} "
           f"({r['rel_err']:.2%})" for r in rows if r["rel_err"] > tol]
    worst = max(rows, key=lambda r: r["rel_err"])
    detail = "; ".join(bad) if bad else f"worst {worst['name']} {worst['rel_err']:.2%}"
    return len(rows) == len(TABLE1) and not bad, detail


def _flops_config(T_, N, D, L=12):
    return EncoderConfig(layers=L, width=D, head_dim=D // 4, patch=8,
                         image={4: 16, 16: 32}[N], frames=T_, embed_dim=8)


@check("flops: instrumented counter equals closed form (grid x schedules x modes)")
def check_reconciliation(Ts=(1, 2, 4), Ns=(4, 16), Ds=(16, 32, 64)):
    runs, bad = 0, []
    for T_ in Ts:
        for N in Ns:
            for D in Ds:
                cfg = _flops_config(T_, N, D)
                p = VideoEncoderParams.init(cfg, D)
                clip = Rng(T_ * N).uniform(size=(T_, 3, cfg.image, cfg.image))
                for name in sorted(SCHEDULE_PATTERNS):
                    for mode in ("dense", "space-time"):
                        rep = instrumented_run(p, cfg, clip, named_schedule(name, cfg), mode)
                        runs += 1
                        if rep.instrumented != rep.total:
                            bad.append(f"T={T_} N={N} D={D} {name} {mode}: "
                                       f"{rep.instrumented} != {rep.total}")
    return not bad, "; ".join(bad[:3]) if bad else f"{runs} runs exact"


def _random_ln(rng, dim):
    return LayerNormParams(Tensor(1 + 0.3 * rng.normal(dim), requires_grad=True),
                           Tensor(0.3 * rng.normal(dim), requires_grad=True))


def _random_layer(rng, D, H, mode):
    p = LayerParams.init(rng.child("p"), D, H, mode)
    p.norm1, p.norm2 = _random_ln(rng.child("n1"), D), _random_ln(rng.child("n2"), D)
    if p.norm_time is not None:
        p.norm_time = _random_ln(rng.child("nt"), D)
    for name, t in named_parameters(p):
        if name.endswith("bias"):
            t.data = 0.1 * rng.child(name).normal(t.shape)
    return p


@check("slicing: every block at every width equals its materialized sub-model")
def check_slicing_oracles(draws=20, D=32, H=8):
    widths = (D, 3 * D // 4, D // 2, D // 4)
    bad = []
    for seed in range(draws):
        r = Rng(seed).child("slicing")
        lin = LinearParams.init(r.child("l"), D, D)
        ln = _random_ln(r.child("n"), D)
        mha = MHAParams.init(r.child("m"), D, H)
        ffn = FFNParams.init(r.child("f"), D)
        layers = {m: _random_layer(r.child(m), D, H, m) for m in ("plain", "space-time")}
        for d in widths:
            x = r.child(f"x{d}").normal((2, 1 + 2 * 3, d))
            sub = R.materialize_linear(lin, d, d)
            got = {
                "linear": (adaptive_linear(lin, Tensor(x), d, d).data,
                           R.ref_linear(sub.weight.data, sub.bias.data, x)),
                "layernorm": (adaptive_layernorm(ln, Tensor(x), d).data,
                              R._ln(R.materialize_layernorm(ln, d), x)),
                "mha": (adaptive_mha(mha, Tensor(x[0]), d).data,
                        R.ref_mha(R.materialize_mha(mha, d), x[0])),
                "ffn": (adaptive_ffn(ffn, Tensor(x), d).data,
                        R.ref_ffn(R.materialize_ffn(ffn, d), x)),
                "plain": (adaptive_layer_forward(layers["plain"], Tensor(x[0]), d).data,
                          R.ref_layer_plain(R.materialize_layer(layers["plain"], d), x[0])),
                "space-time": (
                    adaptive_layer_forward(layers["space-time"], Tensor(x[0]), d,
                                           "space-time", (2, 3)).data,
                    R.ref_layer_spacetime(R.materialize_layer(layers["space-time"], d),
                                          x[0], 2, 3)),
            }
            bad += [f"seed {seed} d={d} {k}" for k, (a, b) in got.items()
                    if not np.array_equal(a, b)]
        cfg = EncoderConfig(layers=2, width=D, head_dim=H, patch=8, image=16, frames=2,
                            embed_dim=8)
        p = VideoEncoderParams.init(cfg, seed)
        clip = r.child("clip").uniform(size=(2, 3, 16, 16))
        if not np.array_equal(encode(p, cfg, clip, full_schedule(cfg)).data,
                              R.ref_encode(p, cfg, clip)):
            bad.append(f"seed {seed} full-width encoder")
    n = draws * (len(widths) * 6 + 1)
    return not bad, "; ".join(bad[:3]) if bad else f"{n} comparisons bit-exact"


# L=2, D=16, 8 heads of size 2, T=2, N=4 (16x16 images, 8x8 patches)
GRAD_VIDEO = EncoderConfig(layers=2, width=16, head_dim=2, patch=8, image=16, frames=2,
                           embed_dim=8)


def _grad_model(seed=5):
    vocab = Vocab.build(["red patch moves left", "blue patch moves up"])
    tcfg = TextConfig(layers=1, width=16, heads=2, max_len=8, embed_dim=8,
                      vocab_size=len(vocab))
    return DualEncoder.init(GRAD_VIDEO, tcfg, vocab, seed=seed)


@check("gradients: end-to-end finite differences through InfoNCE, B=2")
def check_gradients(schedules=((16, 16), (16, 8), (4, 12)), max_entries=8, tol=1e-4):
    model = _grad_model()
    ids, mask = tokenize_batch(["red patch moves left", "blue patch moves up"], model.vocab, 8)
    clips = Rng(6).uniform(size=(2, 2, 3, 16, 16))
    params = parameters(model.video) + parameters(model.text)
    errs = {}
    for widths in schedules:
        def f(widths=widths):
            v = encode(model.video, GRAD_VIDEO, clips, DimSchedule(widths))
            t = encode_text(model.text, model.text_config, ids, mask)
            return info_nce(v, t, 0.05)
        errs[widths] = T.grad_check(f, params, max_entries=max_entries)
    # head size 8 at D=16: one or two heads through both attention routings
    for d in (16, 8):
        p = LayerParams.init(Rng(9), 16, 8, mode="space-time")
        x = Tensor(Rng(10).normal((2, 9, d)), requires_grad=True)
        c = Tensor(Rng(11).normal((2, 9, d)))
        errs[f"layer H=8 d={d}"] = T.grad_check(
            lambda: (adaptive_layer_forward(p, x, d, "space-time", (2, 4)) * c).mean(),
            parameters(p) + [x], max_entries=10)
    worst = max(errs.values())
    return worst < tol, f"max relative error {worst:.2e}"


def _active_region(name, shape, d):
    if name.endswith("fc1.weight"):
        return (slice(0, 4 * d), slice(0, d))
    if name.endswith("fc1.bias"):
        return (slice(0, 4 * d),)
    if name.endswith("fc2.weight"):
        return (slice(0, d), slice(0, 4 * d))
    return tuple(slice(0, d) for _ in shape)


@check("locality: width D/4 backward leaves zero gradient outside the slice")
def check_locality(D=32, H=8):
    d = D // 4
    r = Rng(12)
    x = Tensor(r.child("x").normal((1 + 2 * 3, d)))
    w = Tensor(r.child("w").normal((1 + 2 * 3, d)))
    blocks = {
        "linear": (LinearParams.init(r.child("l"), D, D), lambda p: adaptive_linear(p, x, d, d)),
        "layernorm": (_random_ln(r.child("n"), D), lambda p: adaptive_layernorm(p, x, d)),
        "mha": (MHAParams.init(r.child("m"), D, H), lambda p: adaptive_mha(p, x, d)),
        "ffn": (FFNParams.init(r.child("f"), D), lambda p: adaptive_ffn(p, x, d)),
        "plain": (_random_layer(r.child("pl"), D, H, "plain"),
                  lambda p: adaptive_layer_forward(p, x, d)),
        "space-time": (_random_layer(r.child("st"), D, H, "space-time"),
                       lambda p: adaptive_layer_forward(p, x, d, "space-time", (2, 3))),
    }
    bad = []
    for block, (params, fwd) in blocks.items():
        T.backward((fwd(params) * w).sum())
        touched = 0
        for name, t in named_parameters(params):
            g = np.zeros(t.shape) if t.grad is None else t.grad
            outside = np.ones(t.shape, bool)
            outside[_active_region(name, t.shape, d)] = False
            if np.any(g[outside] != 0):
                bad.append(f"{block}.{name}")
            touched += np.count_nonzero(g)
        if not touched:
            bad.append(f"{block}: no gradient at all")
    return not bad, ", ".join(bad) if bad else f"{len(blocks)} blocks local"


@check("sampler: decreasing schedules are monotone and layer 1 follows the max law")
def check_sampler(draws=10_000, layers=8, alpha=0.01):
    cfg = EncoderConfig(layers=layers)
    rng = Rng(7).child("sampler")
    allowed = set(cfg.allowed_widths)
    firsts = []
    for _ in range(draws):
        w = sample_schedule("decreasing", cfg, rng).widths
        if not set(w) <= allowed or any(a < b for a, b in zip(w, w[1:])):
            return False, f"bad schedule {w}"
        firsts.append(w[0])
    ordered = sorted(allowed)
    observed = np.array([firsts.count(w) for w in ordered])
    cdf = np.array([((k + 1) / 4) ** layers for k in range(4)])
    expected = draws * np.diff(np.concatenate([[0.0], cdf]))
    # merge sparse cells so every expected count is at least 5
    while expected[0] < 5:
        expected[1] += expected[0]
        observed[1] += observed[0]
        expected, observed = expected[1:], observed[1:]
    p = stats.chisquare(observed, expected).pvalue
    return p > alpha, f"chi-square p={p:.3f} over {len(expected)} cells"


# ---------------------------------------------------------- module invariants
@check("video: embeddings are unit-norm for random schedules")
def check_unit_norm():
    cfg = EncoderConfig(layers=4, width=32, head_dim=8, patch=8, image=16, frames=2,
                        embed_dim=8)
    worst = 0.0
    for seed in range(5):
        p = VideoEncoderParams.init(cfg, seed)
        sched = sample_schedule("unconstrained", cfg, Rng(seed))
        e = encode(p, cfg, Rng(seed).uniform(size=(2, 3, 16, 16)), sched).data
        worst = max(worst, abs(float(np.linalg.norm(e)) - 1.0))
    return worst <= 1e-9, f"max |norm - 1| = {worst:.1e}"


@check("video: changing only the last frame changes the embedding (10 seeds)")
def check_time_sensitivity():
    cfg = EncoderConfig(layers=4, width=32, head_dim=8, patch=8, image=16, frames=3,
                        embed_dim=8)
    worst = -1.0
    for seed in range(10):
        p = VideoEncoderParams.init(cfg, seed)
        a = Rng(seed).child("a").uniform(size=(3, 3, 16, 16))
        b = a.copy()
        b[-1] = Rng(seed).child("b").uniform(size=b[-1].shape)
        cos = float(encode(p, cfg, a, full_schedule(cfg)).data
                    @ encode(p, cfg, b, full_schedule(cfg)).data)
        worst = max(worst, cos)
    return worst < 1 - 1e-6, f"max cosine {worst:.6f}"


@check("layers: pad-then-truncate transitions round-trip; heads are d/H")
def check_transitions_and_heads():
    x = Tensor(Rng(1).normal((5, 8)))
    back = transition(transition(x, 8, 32), 32, 8)
    if not np.array_equal(back.data, x.data):
        return False, "round trip changed values"
    m = MHAParams.init(Rng(2), 32, 8)
    for d in (8, 16, 24, 32):
        _, probs = adaptive_mha(m, Tensor(Rng(d).normal((6, d))), d, return_probs=True)
        if probs.shape[-3] != d // 8 or not np.allclose(probs.data.sum(-1), 1.0, atol=1e-12):
            return False, f"d={d}: {probs.shape}"
    return True, "ok"


@check("text: trailing padding does not change the embedding")
def check_text_padding():
    vocab = Vocab.build(["red patch moves left"])
    cfg = TextConfig(layers=2, width=16, heads=2, max_len=16, embed_dim=8,
                     vocab_size=len(vocab))
    p = TextEncoderParams.init(cfg, 3)
    a = encode_text(p, cfg, *tokenize_batch(["red patch moves left"], vocab, 8)).data
    b = encode_text(p, cfg, *tokenize_batch(["red patch moves left"], vocab, 16)).data
    err = float(np.abs(a - b).max())
    return err <= 1e-12, f"max diff {err:.1e}"


@check("train: InfoNCE examples and AdamW against a scalar reference")
def check_loss_and_optimizer():
    e = np.tile(np.ones((1, 4)) / 2.0, (4, 1))
    same = info_nce(Tensor(e), Tensor(e), 0.05).item()
    ortho = info_nce(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.05).item()
    if abs(same - math.log(4)) > 1e-12 or abs(ortho - math.log1p(math.exp(-20))) > 1e-12:
        return False, f"InfoNCE {same}, {ortho}"
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = AdamW([x], lr=0.1, weight_decay=0.5)
    ref, m, v = np.array([2.0, -1.0]), np.zeros(2), np.zeros(2)
    for t in range(1, 21):
        opt.zero_grad()
        T.backward((x * x).sum())
        opt.step()
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.05) - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    err = float(np.abs(x.data - ref).max())
    return err <= 1e-12, f"AdamW max diff {err:.1e}"


@check("aggregator: order-sensitive, and training it leaves the encoder untouched")
def check_aggregator():
    cfg = AggregatorConfig(layers=2, width=16, heads=2, max_segments=4, embed_dim=8)
    p = AggregatorParams.init(cfg, 0)
    f = Rng(4).normal((1, 4, 8))
    f /= np.linalg.norm(f, axis=-1, keepdims=True)
    a = aggregate(p, cfg, f).data
    b = aggregate(p, cfg, f[:, ::-1]).data
    if float(a[0] @ b[0]) >= 1 - 1e-6:
        return False, "reversed segments give the same embedding"
    enc = _grad_model()
    before = hashlib.sha256(io.checkpoint_bytes(enc.config(), enc.tensors())).hexdigest()
    feats = {"d-full": np.concatenate([f, f[:, ::-1]])}
    train_aggregator(TrainConfig(batch_size=2, steps=3, lr=1e-3), feats, [0, 1],
                     ["red patch moves left", "blue patch moves up"], enc, cfg)
    after = hashlib.sha256(io.checkpoint_bytes(enc.config(), enc.tensors())).hexdigest()
    return before == after, "encoder hash unchanged" if before == after else "encoder changed"


@check("flops: dense at T=1 is MHA+FFN; segmented with S=1 is space-time")
def check_flop_identities():
    for N, D in ((196, 768), (4, 16), (16, 64)):
        if dense_layer_flops(1, N, D) != mha_flops(N, D) + ffn_flops(N, D):
            return False, f"dense identity at N={N} D={D}"
        for T_ in (1, 2, 4, 16):
            if hier_layer_flops(T_, N, D, 1) != spacetime_layer_flops(T_, N, D):
                return False, f"segmented identity at T={T_}"
    return True, "ok"


@check("io: checkpoint, clip and feature files round-trip; config hash is order-free")
def check_io():
    model = _grad_model()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        back = DualEncoder.load(path)
        clips = Rng(8).uniform(size=(2, 2, 3, 16, 16))
        sched = DimSchedule((16, 8))
        if not np.array_equal(back.embed_videos(clips, sched),
                              model.embed_videos(clips, sched)):
            return False, "checkpoint round trip changed embeddings"
        io.save_clips(os.path.join(tmp, "c.clip"), clips)
        if not np.array_equal(io.load_clips(os.path.join(tmp, "c.clip")), clips):
            return False, "clip round trip"
        io.write_feature_record(os.path.join(tmp, "f.cache"), "v0", "d-dec", clips[0, 0, 0])
        vid, name, feats = io.read_feature_record(os.path.join(tmp, "f.cache"))
        if (vid, name) != ("v0", "d-dec") or not np.array_equal(feats, clips[0, 0, 0]):
            return False, "feature record round trip"
    if io.config_hash({"a": 1, "b": 2}) != io.config_hash({"b": 2, "a": 1}):
        return False, "config hash depends on key order"
    return True, "ok"


@check("data: regeneration is bit-identical; noise 0 gives identical samples")
def check_data():
    spec = SyntheticDatasetSpec(samples_per_class=2, test_per_class=1, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    if a.train_clips.tobytes() != b.train_clips.tobytes() or a.summaries != b.summaries:
        return False, "regeneration differs"
    z = generate_synthetic(SyntheticDatasetSpec(noise=0.0, samples_per_class=2))
    if not np.array_equal(z.train_clips[0], z.train_clips[1]):
        return False, "noise-free samples differ"
    return True, "ok"


@check("eval: MCQ ties go to the lowest index; R@1 <= R@5 <= R@10")
def check_eval():
    q = np.array([[1.0, 0.0]])
    c = np.array([[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]])
    if mcq_accuracy(q, c, [1]) != 1.0:
        return False, "tie-break"
    for seed in range(10):
        r = Rng(seed)
        rec = retrieval_eval(r.normal((12, 6)), r.normal((15, 6)), r.integers(0, 15, 12))
        if not rec["R@1"] <= rec["R@5"] <= rec["R@10"]:
            return False, f"recall order {rec}"
    return True, "ok"


# ------------------------------------------------------------------ runner
def run_selfcheck(out=print) -> bool:
    passed = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        passed += bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}  [{detail}; {time.perf_counter() - t0:.1f}s]")
    out(f"{passed}/{len(CHECKS)} checks passed")
    return passed == len(CHECKS)
