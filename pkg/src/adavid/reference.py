"""Straight-line numpy references used as test oracles.

Nothing here touches :class:`~adavid.tensor.Tensor` or the slicing helpers.
The arithmetic follows the same operation order as the library (scale applied
as a multiply by ``1/sqrt(H)``, bias added after the product, max-subtracted
softmax) so that full-width comparisons can demand bit equality.

Two kinds of oracle live here:

* ``ref_*`` functions: plain per-head / per-frame loops over raw arrays.
* ``materialize_*`` functions: copy the leading sub-blocks of a parameter set
  into a new, smaller parameter set, which then runs at its own full width.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .layers import FFNParams, LayerNormParams, LayerParams, LinearParams, MHAParams
from .tensor import Tensor


# ------------------------------------------------------------------ numerics
def ref_linear(w, b, x):
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1]) @ np.asarray(w).T if x.ndim > 2 else x @ np.asarray(w).T
    return y.reshape(*lead, w.shape[0]) + b


def ref_layernorm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + eps)) * gamma + beta


def ref_gelu(x):
    return x * (0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0)))))


def ref_softmax(s):
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _w(lin: LinearParams):
    return lin.weight.data, lin.bias.data


def ref_attention_rows(q, k, v, head_dim, key_bias=None):
    """Attention for 2-D ``q (Kq, d)``, ``k, v (Kk, d)`` with a loop over heads."""
    heads = q.shape[-1] // head_dim
    outs = []
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        s = (q[:, sl] @ k[:, sl].T) * (1.0 / math.sqrt(head_dim))
        if key_bias is not None:
            s = s + key_bias
        outs.append(ref_softmax(s) @ v[:, sl])
    return np.concatenate(outs, axis=-1)


def ref_mha(p: MHAParams, x, key_mask=None):
    """Vanilla full-width multi-head self-attention on one ``(K, D)`` token set."""
    q, k, v = (ref_linear(*_w(lin), x) for lin in (p.q, p.k, p.v))
    bias = None if key_mask is None else np.where(np.asarray(key_mask, bool), 0.0, -1e9)
    return ref_linear(*_w(p.o), ref_attention_rows(q, k, v, p.head_dim, bias))


def ref_ffn(p: FFNParams, x):
    return ref_linear(*_w(p.fc2), ref_gelu(ref_linear(*_w(p.fc1), x)))


def _ln(p: LayerNormParams, x):
    return ref_layernorm(x, p.gamma.data, p.beta.data, p.eps)


def ref_layer_plain(p: LayerParams, x, key_mask=None):
    x = x + ref_mha(p.attn, _ln(p.norm1, x), key_mask)
    return x + ref_ffn(p.ffn, _ln(p.norm2, x))


def ref_space(p: MHAParams, x, T, N):
    """Space sub-block on one clip ``(1 + T*N, D)`` with cls first."""
    q, k, v = (ref_linear(*_w(lin), x) for lin in (p.q, p.k, p.v))
    out = np.zeros_like(q)
    out[0] = ref_attention_rows(q[:1], k, v, p.head_dim)[0]
    for t in range(T):
        rows = 1 + t * N + np.arange(N)
        keys = np.concatenate([[0], rows])
        out[rows] = ref_attention_rows(q[rows], k[keys], v[keys], p.head_dim)
    return ref_linear(*_w(p.o), out)


def ref_time(p: MHAParams, x, T, N):
    """Time sub-block: same-position patches plus cls; cls gets a zero update."""
    q, k, v = (ref_linear(*_w(lin), x) for lin in (p.q, p.k, p.v))
    out = np.zeros_like(q)
    for n in range(N):
        rows = 1 + np.arange(T) * N + n
        keys = np.concatenate([[0], rows])
        out[rows] = ref_attention_rows(q[rows], k[keys], v[keys], p.head_dim)
    res = ref_linear(*_w(p.o), out[1:])
    return np.concatenate([np.zeros((1, x.shape[-1])), res])


def ref_layer_spacetime(p: LayerParams, x, T, N):
    x = x + ref_space(p.attn, _ln(p.norm1, x), T, N)
    x = x + ref_time(p.attn_time, _ln(p.norm_time, x), T, N)
    return x + ref_ffn(p.ffn, _ln(p.norm2, x))


def ref_patches(clip, P):
    """``(T, C, H, W)`` -> ``(T, N, C*P*P)`` with explicit loops."""
    T_, C, H, W = clip.shape
    out = []
    for t in range(T_):
        frame = []
        for r in range(H // P):
            for c in range(W // P):
                frame.append(clip[t, :, r * P:(r + 1) * P, c * P:(c + 1) * P].reshape(-1))
        out.append(frame)
    return np.asarray(out)


def ref_encode(params, config, clip):
    """Schedule-free full-width video encoder for a single clip."""
    T_ = clip.shape[0]
    N = config.tokens_per_frame
    tok = ref_linear(*_w(params.patch_proj), ref_patches(clip, config.patch))
    tok = tok + params.pos_space.data[:N] + params.pos_time.data[:T_, None, :]
    x = np.concatenate([params.cls.data[None], tok.reshape(T_ * N, -1)])
    for layer in params.layers:
        x = ref_layer_spacetime(layer, x, T_, N)
    x = _ln(params.final_norm, x)
    e = ref_linear(*_w(params.head), x[0])
    return e / np.sqrt((e * e).sum())


# -------------------------------------------------------- sub-model materialize
def _copy(a):
    return Tensor(np.array(a, copy=True), requires_grad=True)


def materialize_linear(p: LinearParams, d_out, d_in) -> LinearParams:
    return LinearParams(_copy(p.weight.data[:d_out, :d_in]), _copy(p.bias.data[:d_out]), "none")


def materialize_layernorm(p: LayerNormParams, d) -> LayerNormParams:
    return LayerNormParams(_copy(p.gamma.data[:d]), _copy(p.beta.data[:d]), p.eps)


def materialize_mha(p: MHAParams, d) -> MHAParams:
    return MHAParams(*(materialize_linear(lin, d, d) for lin in (p.q, p.k, p.v, p.o)),
                     head_dim=p.head_dim)


def materialize_ffn(p: FFNParams, d) -> FFNParams:
    return FFNParams(materialize_linear(p.fc1, 4 * d, d), materialize_linear(p.fc2, d, 4 * d))


def materialize_layer(p: LayerParams, d) -> LayerParams:
    st = p.attn_time is not None
    return LayerParams(
        norm1=materialize_layernorm(p.norm1, d), attn=materialize_mha(p.attn, d),
        norm2=materialize_layernorm(p.norm2, d), ffn=materialize_ffn(p.ffn, d),
        norm_time=materialize_layernorm(p.norm_time, d) if st else None,
        attn_time=materialize_mha(p.attn_time, d) if st else None)


def masked_linear(p: LinearParams, d_out, d_in) -> LinearParams:
    """Full-size copy with every entry outside the active block set to zero."""
    w = np.zeros_like(p.weight.data)
    w[:d_out, :d_in] = p.weight.data[:d_out, :d_in]
    b = np.zeros_like(p.bias.data)
    b[:d_out] = p.bias.data[:d_out]
    return LinearParams(_copy(w), _copy(b), p.nest)
