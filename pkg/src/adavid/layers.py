"""Width-adaptive transformer blocks.

Each block owns full-width parameters and can run at any active width
``d <= D`` by reading only the leading slice of every weight, bias and norm
vector. Attention keeps the per-head size fixed and drops trailing heads, so
the q/k/v weights are laid out head-major: rows ``h*H:(h+1)*H`` belong to head
``h``.

Token tensors are ``(..., K, d)``; any leading axes are treated as batch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import RejectedInput, Tensor, flop_scope

MASK_VALUE = -1e9
RESIDUAL_GAIN = 0.1


def residual_scale(n_layers: int) -> float:
    """Init multiplier for projections that write into the residual stream.

    Keeping these small makes every layer start close to the identity, so
    freshly initialised encoders map all inputs to nearly the same embedding.
    """
    return RESIDUAL_GAIN * (2 * n_layers) ** -0.5


# ------------------------------------------------------------------ params
@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)
    nest: str = "both"  # which sides may be sliced: both | in | out | none

    @classmethod
    def init(cls, rng, out_dim, in_dim, nest="both", std=None):
        std = in_dim**-0.5 if std is None else std
        return cls(Tensor(rng.normal((out_dim, in_dim), std), requires_grad=True),
                   Tensor(np.zeros(out_dim), requires_grad=True), nest)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, dim, eps=1e-5):
        return cls(Tensor(np.ones(dim), requires_grad=True),
                   Tensor(np.zeros(dim), requires_grad=True), eps)

    @property
    def dim(self):
        return self.gamma.shape[0]


@dataclass
class MHAParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    head_dim: int

    @classmethod
    def init(cls, rng, dim, head_dim, out_scale=1.0):
        if dim % head_dim:
            raise RejectedInput(f"width {dim} is not a multiple of head_dim {head_dim}")
        q, k, v = (LinearParams.init(rng.child(n), dim, dim) for n in "qkv")
        o = LinearParams.init(rng.child("o"), dim, dim, std=out_scale * dim**-0.5)
        return cls(q, k, v, o, head_dim=head_dim)

    @property
    def dim(self):
        return self.q.out_dim

    @property
    def max_heads(self):
        return self.dim // self.head_dim


@dataclass
class FFNParams:
    fc1: LinearParams  # (4D, D)
    fc2: LinearParams  # (D, 4D)

    @classmethod
    def init(cls, rng, dim, out_scale=1.0):
        return cls(LinearParams.init(rng.child("fc1"), 4 * dim, dim),
                   LinearParams.init(rng.child("fc2"), dim, 4 * dim,
                                     std=out_scale * (4 * dim)**-0.5))

    @property
    def dim(self):
        return self.fc2.out_dim


@dataclass
class LayerParams:
    """Pre-norm transformer layer; ``attn_time`` is set only in space-time mode."""

    norm1: LayerNormParams
    attn: MHAParams
    norm2: LayerNormParams
    ffn: FFNParams
    norm_time: LayerNormParams | None = None
    attn_time: MHAParams | None = None

    @classmethod
    def init(cls, rng, dim, head_dim, mode="plain", out_scale=1.0):
        """``out_scale`` shrinks the init of the projections feeding each residual."""
        if mode not in ("plain", "space-time"):
            raise RejectedInput(f"unknown layer mode {mode!r}")
        st = mode == "space-time"
        return cls(
            norm1=LayerNormParams.init(dim),
            attn=MHAParams.init(rng.child("attn"), dim, head_dim, out_scale),
            norm2=LayerNormParams.init(dim),
            ffn=FFNParams.init(rng.child("ffn"), dim, out_scale),
            norm_time=LayerNormParams.init(dim) if st else None,
            attn_time=(MHAParams.init(rng.child("attn_time"), dim, head_dim, out_scale)
                       if st else None),
        )

    @property
    def mode(self):
        return "plain" if self.attn_time is None else "space-time"

    @property
    def dim(self):
        return self.attn.dim


def named_parameters(obj, prefix: str = ""):
    """Yield ``(dotted_name, Tensor)`` for every tensor reachable from ``obj``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), sub)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def parameters(obj):
    return [t for _, t in named_parameters(obj)]


# ------------------------------------------------------------------ blocks
def _check_width(d, full, what="width"):
    if not 1 <= d <= full:
        raise RejectedInput(f"{what} {d} outside [1, {full}]")


def adaptive_linear(p: LinearParams, x: Tensor, d_out: int, d_in: int) -> Tensor:
    """``x @ W[:d_out, :d_in].T + b[:d_out]``."""
    _check_width(d_out, p.out_dim, "output width")
    _check_width(d_in, p.in_dim, "input width")
    if d_out != p.out_dim and p.nest in ("in", "none"):
        raise RejectedInput("this linear layer does not allow output slicing")
    if d_in != p.in_dim and p.nest in ("out", "none"):
        raise RejectedInput("this linear layer does not allow input slicing")
    if x.shape[-1] != d_in:
        raise RejectedInput(f"input has {x.shape[-1]} channels, expected {d_in}")
    w, b = p.weight, p.bias
    if (d_out, d_in) != w.shape:
        w = w[:d_out, :d_in]
    if d_out != b.shape[0]:
        b = b[:d_out]
    if x.ndim == 1:
        return (x.reshape(1, d_in) @ w.T + b).reshape(d_out)
    return x @ w.T + b


def adaptive_layernorm(p: LayerNormParams, x: Tensor, d: int) -> Tensor:
    """Normalise over the first ``d`` channels with ``gamma[:d], beta[:d]``."""
    if d < 1:
        raise RejectedInput("layer norm width must be positive")
    _check_width(d, p.dim)
    if x.shape[-1] != d:
        raise RejectedInput(f"input has {x.shape[-1]} channels, expected {d}")
    g, b = p.gamma, p.beta
    if d != p.dim:
        g, b = g[:d], b[:d]
    return T.layer_norm(x, g, b, p.eps)


def check_head_width(p: MHAParams, d: int) -> None:
    if d % p.head_dim or not 0 < d <= p.dim:
        allowed = list(range(p.head_dim, p.dim + 1, p.head_dim))
        raise RejectedInput(
            f"attention width {d} must be a multiple of head_dim {p.head_dim}; "
            f"allowed widths: {allowed}")


def _split_heads(x: Tensor, head_dim: int) -> Tensor:
    *lead, k, d = x.shape
    x = x.reshape(*lead, k, d // head_dim, head_dim)
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, k, hd = x.shape
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, k, h * hd)


def attend(q: Tensor, k: Tensor, v: Tensor, head_dim: int, bias=None,
           return_probs=False):
    """Scaled dot-product attention on already-projected ``(..., K, d)`` inputs.

    ``bias`` is an additive array broadcastable to ``(..., heads, Kq, Kk)``.
    """
    qh, kh, vh = (_split_heads(t, head_dim) for t in (q, k, v))
    with flop_scope("scores"):
        scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    if bias is not None:
        scores = scores + bias
    probs = T.softmax(scores)
    with flop_scope("weighted_sum"):
        out = _merge_heads(probs @ vh)
    return (out, probs) if return_probs else out


def _qkv(p: MHAParams, x: Tensor, d: int):
    with flop_scope("qkv"):
        return (adaptive_linear(p.q, x, d, d), adaptive_linear(p.k, x, d, d),
                adaptive_linear(p.v, x, d, d))


def _out_proj(p: MHAParams, x: Tensor, d: int) -> Tensor:
    with flop_scope("out_proj"):
        return adaptive_linear(p.o, x, d, d)


def key_mask_bias(key_mask) -> np.ndarray:
    """``(B, K)`` boolean keep-mask -> additive bias ``(B, 1, 1, K)``."""
    m = np.asarray(key_mask, dtype=bool)
    return np.where(m, 0.0, MASK_VALUE)[:, None, None, :]


def adaptive_mha(p: MHAParams, x: Tensor, d: int, key_mask=None,
                 return_probs=False):
    """Full self-attention over the token axis using the first ``d/H`` heads."""
    check_head_width(p, d)
    q, k, v = _qkv(p, x, d)
    bias = None if key_mask is None else key_mask_bias(key_mask)
    res = attend(q, k, v, p.head_dim, bias, return_probs)
    if return_probs:
        out, probs = res
        return _out_proj(p, out, d), probs
    return _out_proj(p, res, d)


def adaptive_ffn(p: FFNParams, x: Tensor, d: int) -> Tensor:
    """``W2[:d, :4d] gelu(W1[:4d, :d] x + b1[:4d]) + b2[:d]``."""
    with flop_scope("ffn"):
        h = T.gelu(adaptive_linear(p.fc1, x, 4 * d, d))
        return adaptive_linear(p.fc2, h, d, 4 * d)


def transition(x: Tensor, d_from: int, d_to: int, allowed=None) -> Tensor:
    """Move tokens between layer widths: zero-pad upward, truncate downward."""
    if allowed is not None:
        for w in (d_from, d_to):
            if w not in allowed:
                raise RejectedInput(f"width {w} not in allowed set {sorted(allowed)}")
    if x.shape[-1] != d_from:
        raise RejectedInput(f"tokens have {x.shape[-1]} channels, expected {d_from}")
    if d_to > d_from:
        return T.pad_last(x, d_to)
    if d_to < d_from:
        return x[..., :d_to]
    return x


# ---------------------------------------------------------- divided attention
def space_attention(p: MHAParams, x: Tensor, d: int, grid_dims, has_cls=True):
    """Within-frame attention.

    Patch tokens of frame ``t`` attend to that frame's ``N`` tokens plus the
    cls token; the cls token attends to every token.
    """
    t_, n_ = grid_dims
    lead = x.shape[:-2]
    q, k, v = _qkv(p, x, d)
    if not has_cls:
        g = lambda z: z.reshape(*lead, t_, n_, d)
        out = attend(g(q), g(k), g(v), p.head_dim)
        return _out_proj(p, out.reshape(*lead, t_ * n_, d), d)
    qp = q[..., 1:, :].reshape(*lead, t_, n_, d)
    kc, vc = (T.broadcast_to(z[..., None, 0:1, :], (*lead, t_, 1, d)) for z in (k, v))
    kp = T.concat([kc, k[..., 1:, :].reshape(*lead, t_, n_, d)], axis=-2)
    vp = T.concat([vc, v[..., 1:, :].reshape(*lead, t_, n_, d)], axis=-2)
    out_p = attend(qp, kp, vp, p.head_dim).reshape(*lead, t_ * n_, d)
    out_c = attend(q[..., 0:1, :], k, v, p.head_dim)
    return _out_proj(p, T.concat([out_c, out_p], axis=-2), d)


def time_attention(p: MHAParams, x: Tensor, d: int, grid_dims, has_cls=True):
    """Across-frame attention between same-position patch tokens.

    The cls token is an extra key/value in every group; its own update from
    this sub-block is zero.
    """
    t_, n_ = grid_dims
    lead = x.shape[:-2]
    nl = len(lead)
    q, k, v = _qkv(p, x, d)

    def by_pos(z):
        # (..., T*N, d) -> (..., N, T, d)
        return z.reshape(*lead, t_, n_, d).swapaxes(nl, nl + 1)

    def back(z):
        return z.swapaxes(nl, nl + 1).reshape(*lead, t_ * n_, d)

    if not has_cls:
        out = attend(by_pos(q), by_pos(k), by_pos(v), p.head_dim)
        return _out_proj(p, back(out), d)
    kc, vc = (T.broadcast_to(z[..., None, 0:1, :], (*lead, n_, 1, d)) for z in (k, v))
    kp = T.concat([kc, by_pos(k[..., 1:, :])], axis=-2)
    vp = T.concat([vc, by_pos(v[..., 1:, :])], axis=-2)
    out_p = _out_proj(p, back(attend(by_pos(q[..., 1:, :]), kp, vp, p.head_dim)), d)
    zero_cls = Tensor(np.zeros((*lead, 1, d)))
    return T.concat([zero_cls, out_p], axis=-2)


def adaptive_layer_forward(p: LayerParams, x: Tensor, d: int, mode: str | None = None,
                           grid_dims=None, has_cls: bool = True, key_mask=None) -> Tensor:
    """One pre-norm residual layer at active width ``d``.

    ``plain``: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))`` over all tokens.
    ``space-time``: space attention, time attention, FFN, each pre-normed
    with its own residual. Tokens are ``[cls] + frame-major patch grid``
    (no cls when ``has_cls`` is false).
    """
    mode = mode or p.mode
    check_head_width(p.attn, d)
    if x.shape[-1] != d:
        raise RejectedInput(f"tokens have {x.shape[-1]} channels, expected {d}")
    if mode == "plain":
        with flop_scope("attn"):
            x = x + adaptive_mha(p.attn, adaptive_layernorm(p.norm1, x, d), d, key_mask)
    elif mode == "space-time":
        if p.attn_time is None:
            raise RejectedInput("layer has no time-attention parameters")
        if grid_dims is None:
            raise RejectedInput("space-time mode needs grid_dims=(T, N)")
        t_, n_ = grid_dims
        if x.shape[-2] != t_ * n_ + int(has_cls):
            raise RejectedInput(
                f"token count {x.shape[-2]} inconsistent with grid {t_}x{n_}"
                f"{' + cls' if has_cls else ''}")
        with flop_scope("space"):
            x = x + space_attention(p.attn, adaptive_layernorm(p.norm1, x, d), d,
                                    grid_dims, has_cls)
        with flop_scope("time"):
            x = x + time_attention(p.attn_time, adaptive_layernorm(p.norm_time, x, d), d,
                                   grid_dims, has_cls)
    else:
        raise RejectedInput(f"unknown layer mode {mode!r}")
    return x + adaptive_ffn(p.ffn, adaptive_layernorm(p.norm2, x, d), d)
