"""Long-video encoding: frozen clip encoder + small transformer over segments."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .layers import (LayerNormParams, LayerParams, LinearParams, adaptive_layer_forward,
                     residual_scale,
                     adaptive_layernorm, adaptive_linear)
from .rng import Rng
from .tensor import RejectedInput, Tensor
from .video import embed_clips


@dataclass
class AggregatorConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    max_segments: int = 16
    embed_dim: int = 32

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AggregatorParams:
    in_proj: LinearParams  # (W, E)
    cls: Tensor  # (W,)
    seg_pos: Tensor  # (max_segments, W)
    layers: list
    final_norm: LayerNormParams
    head: LinearParams  # (E, W)

    @classmethod
    def init(cls, config: AggregatorConfig, seed: int = 0):
        rng = Rng(seed).child("aggregator")
        W, E = config.width, config.embed_dim
        return cls(
            in_proj=LinearParams.init(rng.child("in"), W, E, nest="none"),
            cls=Tensor(rng.child("cls").normal((W,), 0.1), requires_grad=True),
            seg_pos=Tensor(rng.child("pos").normal((config.max_segments, W), 0.1),
                           requires_grad=True),
            layers=[LayerParams.init(rng.child(f"layer{i}"), W, config.head_dim,
                                     out_scale=residual_scale(config.layers))
                    for i in range(config.layers)],
            final_norm=LayerNormParams.init(W),
            head=LinearParams.init(rng.child("head"), E, W, nest="none"),
        )


def segment(video, S: int) -> list:
    """Split ``(T_long, C, H, W)`` frames into ``S`` contiguous clips."""
    video = np.asarray(video)
    if S < 1 or video.shape[0] % S:
        raise RejectedInput(f"{video.shape[0]} frames cannot be split into {S} equal segments")
    per = video.shape[0] // S
    return [video[i * per:(i + 1) * per] for i in range(S)]


def aggregate(params: AggregatorParams, config: AggregatorConfig, feats) -> Tensor:
    """Segment features ``(B, S, E)`` -> unit-norm ``(B, E)`` long-video embeddings."""
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    b, s, e = feats.shape
    if s > config.max_segments:
        raise RejectedInput(f"{s} segments exceeds max_segments {config.max_segments}")
    W = config.width
    x = adaptive_linear(params.in_proj, feats, W, e) + params.seg_pos[:s]
    x = T.concat([T.broadcast_to(params.cls.reshape(1, 1, W), (b, 1, W)), x], axis=1)
    for layer in params.layers:
        x = adaptive_layer_forward(layer, x, W, "plain")
    x = adaptive_layernorm(params.final_norm, x, W)
    return T.l2_normalize(adaptive_linear(params.head, x[:, 0, :], config.embed_dim, W))


def segment_features(video, S, schedule, enc_params, enc_config) -> np.ndarray:
    """Frozen-encoder embeddings ``(S, E)``; no graph is recorded."""
    clips = np.stack(segment(video, S))
    return embed_clips(enc_params, enc_config, clips, schedule)


def encode_long(video, S, schedule, agg_params, agg_config, enc_params, enc_config) -> Tensor:
    feats = segment_features(video, S, schedule, enc_params, enc_config)
    return aggregate(agg_params, agg_config, feats[None])[0]


def mean_pool(feats) -> np.ndarray:
    """L2-normalised mean over the segment axis (second to last)."""
    m = np.asarray(feats).mean(axis=-2)
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise RejectedInput("degenerate norm: segment embeddings average to zero")
    return m / n


def average_pool_baseline(video, S, schedule, enc_params, enc_config) -> np.ndarray:
    return mean_pool(segment_features(video, S, schedule, enc_params, enc_config))
