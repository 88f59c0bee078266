import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adavid import flops as F
from adavid.flops import FlopCounter, instrumented_run, schedule_flops
from adavid.layers import FFNParams, MHAParams, adaptive_ffn, adaptive_mha
from adavid.rng import Rng
from adavid.tensor import RejectedInput, Tensor
from adavid.video import (SCHEDULE_PATTERNS, DimSchedule, EncoderConfig, VideoEncoderParams,
                          encode, named_schedule)

# Values below were computed independently from the published polynomials
# (8ND^2 + 4N^2D, 16ND^2, 24TND^2 + 4T^2N^2D, 32TND^2 + 4TND(N+T)).


def test_mha_examples():
    assert F.mha_flops(1, 2) == 40
    assert F.mha_flops(196, 768) == 1_042_857_984


def test_ffn_examples():
    assert F.ffn_flops(1, 1) == 16
    assert F.ffn_flops(196, 768) == 1_849_688_064


def test_dense_examples():
    for N, D in [(4, 8), (196, 768), (7, 3)]:
        assert F.dense_layer_flops(1, N, D) == F.mha_flops(N, D) + F.ffn_flops(N, D)
    assert F.dense_layer_flops(4, 196, 768) == 12_986_351_616
    assert F.dense_layer_flops(1, 4, 8) == 24 * 4 * 64 + 4 * 16 * 8


@given(st.integers(1, 64), st.integers(1, 256), st.integers(1, 1024))
def test_dense_second_difference_is_quadratic_term(T, N, D):
    # dense(T) is a quadratic polynomial in T with leading coefficient 4N^2D
    d2 = (F.dense_layer_flops(T + 2, N, D) - 2 * F.dense_layer_flops(T + 1, N, D)
          + F.dense_layer_flops(T, N, D))
    assert d2 == 8 * N * N * D


def test_spacetime_examples():
    assert F.spacetime_layer_flops(4, 196, 768) == 15_279_194_112
    assert F.spacetime_layer_flops(4, 196, 192) == 1_045_266_432
    assert 12 * F.spacetime_layer_flops(4, 196, 768) == pytest.approx(18.3e10, rel=0.01)


@given(st.integers(1, 64), st.integers(1, 256), st.integers(1, 1024))
def test_spacetime_identity(T, N, D):
    assert F.spacetime_layer_flops(T, N, D) == (
        T * F.mha_flops(N, D) + N * F.mha_flops(T, D) + T * F.ffn_flops(N, D))
    parts = F.layer_breakdown(T, N, D)
    assert sum(parts.values()) == F.spacetime_layer_flops(T, N, D)
    space = sum(v for k, v in parts.items() if k.startswith("space/"))
    time = sum(v for k, v in parts.items() if k.startswith("time/"))
    assert (space, time) == (T * F.mha_flops(N, D), N * F.mha_flops(T, D))


def test_hier_examples():
    assert F.hier_layer_flops(8, 5, 6, 1) == F.spacetime_layer_flops(8, 5, 6)
    T, N, D = 8, 5, 6
    assert F.hier_layer_flops(T, N, D, T) == 32 * T * N * D * D + 4 * T * N * D * (N + 1)
    assert F.hier_layer_flops(64, 196, 768, 16) == 244_467_105_792
    with pytest.raises(RejectedInput):
        F.hier_layer_flops(10, 4, 8, 3)


def test_table1_rows():
    rows = {r["name"]: r for r in F.table1()}
    assert rows["d-768"]["flops"] == 183_350_329_344
    assert rows["d-dec"]["flops"] == rows["d-inc"]["flops"]
    assert rows["d-dec-low"]["flops"] / 1e10 == pytest.approx(5.5, rel=0.01)
    assert rows["d-dec"]["flops"] / 1e10 == pytest.approx(8.7, rel=0.01)
    assert rows["d-768"]["ratio"] == 1.0


def test_report_total_is_sum_of_layers():
    rep = schedule_flops((64, 48, 32, 16), 4, 16)
    assert rep.total == sum(rep.per_layer)
    assert [sum(b.values()) for b in rep.breakdown] == rep.per_layer


@given(st.lists(st.sampled_from([16, 32, 48, 64]), min_size=1, max_size=8), st.data())
def test_flops_strictly_increase_with_any_layer_width(widths, data):
    i = data.draw(st.integers(0, len(widths) - 1))
    bigger = list(widths)
    bigger[i] += 16
    for mode in ("dense", "space-time"):
        assert schedule_flops(bigger, 4, 16, mode).total > schedule_flops(widths, 4, 16, mode).total


# ------------------------------------------------------------ instrumented
def test_attention_block_count_matches_formula():
    r = Rng(0)
    p = MHAParams.init(r, 32, 8)
    with FlopCounter() as c:
        adaptive_mha(p, Tensor(r.normal((6, 24))), 24)
    assert c.total == F.mha_flops(6, 24)
    f = FFNParams.init(r, 32)
    with FlopCounter() as c:
        adaptive_ffn(f, Tensor(r.normal((6, 16))), 16)
    assert c.total == F.ffn_flops(6, 16)


def small_config(T, N, D, L=12):
    image = {4: 16, 16: 32}[N]
    return EncoderConfig(layers=L, width=D, head_dim=D // 4, patch=8, image=image, frames=T,
                         embed_dim=8)


def test_one_spacetime_layer_count():
    cfg = small_config(2, 4, 16, L=1)
    p = VideoEncoderParams.init(cfg, 0)
    clip = Rng(0).uniform(size=(2, 3, 16, 16))
    rep = instrumented_run(p, cfg, clip, DimSchedule((16,)))
    assert rep.instrumented == F.spacetime_layer_flops(2, 4, 16) == rep.total


@settings(max_examples=15, deadline=None)
@given(T=st.sampled_from([1, 2, 4]), N=st.sampled_from([4, 16]),
       D=st.sampled_from([16, 32, 64]), name=st.sampled_from(sorted(SCHEDULE_PATTERNS)),
       mode=st.sampled_from(["dense", "space-time"]))
def test_counter_reconciles_with_closed_form(T, N, D, name, mode):
    cfg = small_config(T, N, D)
    p = VideoEncoderParams.init(cfg, 1)
    clip = Rng(1).uniform(size=(T, 3, cfg.image, cfg.image))
    rep = instrumented_run(p, cfg, clip, named_schedule(name, cfg), mode)
    assert rep.instrumented == rep.total


def test_sub_block_counts_match_breakdown():
    cfg = small_config(2, 4, 32, L=4)
    p = VideoEncoderParams.init(cfg, 2)
    clip = Rng(2).uniform(size=(2, 3, 16, 16))
    from adavid.video import patchify, run_layers
    from adavid import tensor as T
    sched = named_schedule("d-dec", cfg)
    with T.no_grad():
        x = patchify(clip, p, cfg, 32)[1:]
        with FlopCounter() as c:
            run_layers(x, p, sched, (2, 4), has_cls=False)
    expect = schedule_flops(sched, 2, 4).breakdown
    for i in range(4):
        assert c.sub_blocks(i) == expect[i]
    assert c.layer_totals(4) == schedule_flops(sched, 2, 4).per_layer


def test_counter_does_not_change_outputs():
    cfg = small_config(2, 4, 32, L=4)
    p = VideoEncoderParams.init(cfg, 3)
    clip = Rng(3).uniform(size=(2, 3, 16, 16))
    sched = named_schedule("d-dec", cfg)
    plain = encode(p, cfg, clip, sched).data
    with FlopCounter(inclusive=True) as c:
        counted = encode(p, cfg, clip, sched).data
    assert np.array_equal(plain, counted)
    assert c.total > schedule_flops(sched, 2, 4).total
