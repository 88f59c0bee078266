"""Closed-form FLOPs for dense, divided space-time and segmented encoders.

Accounting follows the matmul-only convention: one ``(M x K) @ (K x P)``
product costs ``2*M*K*P`` FLOPs, the FFN hidden width is ``4D``, and layer
norms, softmax, biases and residual adds are free. The cls token is ignored.
All arithmetic is on Python ints.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as _tensor
from .tensor import RejectedInput


def mha_flops(N: int, D: int) -> int:
    return 8 * N * D * D + 4 * N * N * D


def ffn_flops(N: int, D: int) -> int:
    return 16 * N * D * D


def dense_layer_flops(T: int, N: int, D: int) -> int:
    return 24 * T * N * D * D + 4 * T * T * N * N * D


def spacetime_layer_flops(T: int, N: int, D: int) -> int:
    return 32 * T * N * D * D + 4 * T * N * D * (N + T)


def hier_layer_flops(T: int, N: int, D: int, S: int) -> int:
    if S < 1 or T % S:
        raise RejectedInput(f"segment count {S} must divide frame count {T}")
    return 32 * T * N * D * D + 4 * T * N * D * (N + T // S)


def _attn_parts(groups: int, K: int, D: int) -> dict:
    return {
        "qkv": groups * 6 * K * D * D,
        "scores": groups * 2 * K * K * D,
        "weighted_sum": groups * 2 * K * K * D,
        "out_proj": groups * 2 * K * D * D,
    }


def layer_breakdown(T: int, N: int, D: int, mode: str = "space-time", S: int = 1) -> dict:
    """Per-sub-block FLOPs of one layer, keyed like ``space/qkv`` or ``ffn``."""
    parts = {}
    if mode == "dense":
        parts.update({f"attn/{k}": v for k, v in _attn_parts(1, T * N, D).items()})
    elif mode in ("space-time", "hier"):
        if mode == "hier" and (S < 1 or T % S):
            raise RejectedInput(f"segment count {S} must divide frame count {T}")
        seg = T // S if mode == "hier" else T
        groups = S if mode == "hier" else 1
        parts.update({f"space/{k}": v for k, v in _attn_parts(T, N, D).items()})
        parts.update({f"time/{k}": v for k, v in _attn_parts(N * groups, seg, D).items()})
    else:
        raise RejectedInput(f"unknown mode {mode!r}")
    parts["ffn"] = ffn_flops(T * N, D)
    return parts


def layer_flops(T: int, N: int, D: int, mode: str = "space-time", S: int = 1) -> int:
    if mode == "dense":
        return dense_layer_flops(T, N, D)
    if mode == "space-time":
        return spacetime_layer_flops(T, N, D)
    if mode == "hier":
        return hier_layer_flops(T, N, D, S)
    raise RejectedInput(f"unknown mode {mode!r}")


@dataclass
class FlopsReport:
    widths: tuple
    T: int
    N: int
    mode: str
    S: int
    per_layer: list
    breakdown: list
    total: int
    instrumented: int | None = None

    @property
    def params(self) -> dict:
        return {"T": self.T, "N": self.N, "mode": self.mode, "S": self.S}


def schedule_flops(widths, T: int, N: int, mode: str = "space-time", S: int = 1) -> FlopsReport:
    """Sum the per-layer formula over a width schedule (or a DimSchedule)."""
    widths = tuple(getattr(widths, "widths", widths))
    per_layer = [layer_flops(T, N, d, mode, S) for d in widths]
    breakdown = [layer_breakdown(T, N, d, mode, S) for d in widths]
    return FlopsReport(widths, T, N, mode, S, per_layer, breakdown, sum(per_layer))


# (name, widths at D=768 / L=12, published total in units of 1e10)
TABLE1 = [
    ("d-768", (768,) * 12, 18.3),
    ("d-576", (576,) * 12, 10.4),
    ("d-384", (384,) * 12, 4.7),
    ("d-192", (192,) * 12, 1.2),
    ("d-dec", (768,) * 3 + (576,) * 3 + (384,) * 3 + (192,) * 3, 8.7),
    ("d-dec-high", (768,) * 4 + (576,) * 4 + (384,) * 4, 11.2),
    ("d-dec-low", (576,) * 4 + (384,) * 4 + (192,) * 4, 5.5),
    ("d-inc", (192,) * 3 + (384,) * 3 + (576,) * 3 + (768,) * 3, 8.7),
    ("d-inc-high", (384,) * 4 + (576,) * 4 + (768,) * 4, 11.2),
    ("d-inc-low", (192,) * 4 + (384,) * 4 + (576,) * 4, 5.5),
]
TABLE1_GEOMETRY = {"T": 4, "N": 196, "D": 768, "L": 12}


def table1(T: int = 4, N: int = 196) -> list[dict]:
    full = schedule_flops(TABLE1[0][1], T, N).total
    rows = []
    for name, widths, published in TABLE1:
        total = schedule_flops(widths, T, N).total
        rows.append({
            "name": name,
            "widths": widths,
            "flops": total,
            "published_e10": published,
            "rel_err": abs(total / 1e10 - published) / published,
            "ratio": total / full,
        })
    return rows


# ------------------------------------------------------------- instrumentation
class FlopCounter:
    """Accumulates FLOPs reported by tensor ops while active.

    Only matmuls are counted unless ``inclusive`` is set, in which case
    elementwise work (norms, softmax, biases, residuals) is counted as well.
    """

    def __init__(self, inclusive: bool = False):
        self.inclusive = inclusive
        self.total = 0
        self.by_scope = defaultdict(int)

    def record(self, kind, path, flops):
        if kind == "matmul" or self.inclusive:
            self.total += flops
            self.by_scope[path] += flops

    def __enter__(self):
        _tensor._COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _tensor._COUNTERS.remove(self)
        return False

    def layer_totals(self, n_layers: int) -> list[int]:
        out = [0] * n_layers
        for path, v in self.by_scope.items():
            head = path.split("/")[0]
            if head.startswith("layer"):
                out[int(head[5:])] += v
        return out

    def sub_blocks(self, layer: int) -> dict:
        """``{"space/qkv": ..., "ffn": ...}`` for one layer."""
        out = defaultdict(int)
        prefix = f"layer{layer}/"
        for path, v in self.by_scope.items():
            if not path.startswith(prefix):
                continue
            parts = path[len(prefix):].split("/")
            if "ffn" in parts:
                out["ffn"] += v
            else:
                out[f"{parts[0]}/{parts[-1]}"] += v
        return dict(out)


def instrumented_run(params, config, clip, schedule, mode: str = "space-time",
                     formula_comparable: bool = True) -> FlopsReport:
    """Run the encoder layers under a counter and report measured FLOPs.

    In formula-comparable mode the cls token is left out of the token grid,
    so the measured count is directly comparable with :func:`schedule_flops`.
    Patch embedding and the output head are never counted.
    """
    from .video import patchify, run_layers

    widths = tuple(getattr(schedule, "widths", schedule))
    t_ = np.shape(clip)[-4]
    n_ = config.tokens_per_frame
    with _tensor.no_grad():
        x = patchify(clip, params, config, widths[0])
        if formula_comparable:
            x = x[..., 1:, :]
        layer_mode = "plain" if mode == "dense" else "space-time"
        with FlopCounter() as counter:
            run_layers(x, params, schedule, (t_, n_), has_cls=not formula_comparable,
                       mode=layer_mode)
    closed = schedule_flops(widths, t_, n_, mode)
    closed.instrumented = counter.total
    return closed
