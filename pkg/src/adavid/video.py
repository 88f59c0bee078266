"""Adaptive space-time video encoder and per-layer width schedules."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .layers import (LayerNormParams, LayerParams, LinearParams, adaptive_layer_forward,
                     residual_scale,
                     adaptive_layernorm, adaptive_linear, transition)
from .rng import Rng
from .tensor import RejectedInput, Tensor, flop_scope


@dataclass
class EncoderConfig:
    layers: int = 8
    width: int = 64
    head_dim: int = 8
    patch: int = 8
    image: int = 32
    frames: int = 4
    max_frames: int = 16
    embed_dim: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.width % 4:
            raise RejectedInput("width must be divisible by 4")
        bad = [w for w in self.allowed_widths if w % self.head_dim]
        if bad:
            raise RejectedInput(f"allowed widths {bad} are not multiples of head_dim "
                                f"{self.head_dim}")
        if self.image % self.patch:
            raise RejectedInput("image size must be a multiple of the patch size")
        if self.frames > self.max_frames:
            raise RejectedInput("frames exceeds max_frames")

    @property
    def allowed_widths(self) -> tuple:
        D = self.width
        return (D, 3 * D // 4, D // 2, D // 4)

    @property
    def tokens_per_frame(self) -> int:
        return (self.image // self.patch) ** 2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DimSchedule:
    widths: tuple
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def __len__(self):
        return len(self.widths)

    @property
    def label(self) -> str:
        return self.name or "-".join(str(w) for w in self.widths)

    def validate(self, config: EncoderConfig) -> None:
        if len(self.widths) != config.layers:
            raise RejectedInput(f"schedule has {len(self.widths)} entries, "
                                f"encoder has {config.layers} layers")
        bad = [w for w in self.widths if w not in config.allowed_widths]
        if bad:
            raise RejectedInput(f"widths {bad} not in allowed set {config.allowed_widths}")


# Layer patterns as fractions-of-D in quarters, one entry per equal-size group.
SCHEDULE_PATTERNS = {
    "d-full": (4,),
    "d-3q": (3,),
    "d-half": (2,),
    "d-quarter": (1,),
    "d-dec": (4, 3, 2, 1),
    "d-dec-high": (4, 3, 2),
    "d-dec-low": (3, 2, 1),
    "d-inc": (1, 2, 3, 4),
    "d-inc-high": (2, 3, 4),
    "d-inc-low": (1, 2, 3),
}


def named_schedule(name: str, config: EncoderConfig) -> DimSchedule:
    if name not in SCHEDULE_PATTERNS:
        raise RejectedInput(f"unknown schedule {name!r}; known: {sorted(SCHEDULE_PATTERNS)}")
    pattern = SCHEDULE_PATTERNS[name]
    if config.layers % len(pattern):
        raise RejectedInput(f"{name} needs a layer count divisible by {len(pattern)}, "
                            f"got {config.layers}")
    per = config.layers // len(pattern)
    widths = [q * config.width // 4 for q in pattern for _ in range(per)]
    return DimSchedule(tuple(widths), name)


def full_schedule(config: EncoderConfig) -> DimSchedule:
    return named_schedule("d-full", config)


EMB_STD = 0.5


@dataclass
class VideoEncoderParams:
    patch_proj: LinearParams  # (D, C*P*P), output side sliceable
    pos_space: Tensor  # (N, D)
    pos_time: Tensor  # (max_frames, D)
    cls: Tensor  # (D,)
    layers: list
    final_norm: LayerNormParams
    head: LinearParams  # (E, D), input side sliceable

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0):
        rng = Rng(seed).child("video-encoder")
        D, P, C = config.width, config.patch, config.channels
        return cls(
            patch_proj=LinearParams.init(rng.child("patch"), D, C * P * P, nest="out"),
            pos_space=Tensor(rng.child("pos_space").normal((config.tokens_per_frame, D), EMB_STD),
                             requires_grad=True),
            pos_time=Tensor(rng.child("pos_time").normal((config.max_frames, D), EMB_STD),
                            requires_grad=True),
            cls=Tensor(rng.child("cls").normal((D,), EMB_STD), requires_grad=True),
            layers=[LayerParams.init(rng.child(f"layer{i}"), D, config.head_dim, "space-time",
                                     out_scale=residual_scale(config.layers))
                    for i in range(config.layers)],
            final_norm=LayerNormParams.init(D),
            head=LinearParams.init(rng.child("head"), config.embed_dim, D, nest="in"),
        )


def flatten_patches(clip: np.ndarray, patch: int) -> np.ndarray:
    """``(..., T, C, H, W)`` -> ``(..., T, N, C*P*P)`` in row-major patch order."""
    clip = np.asarray(clip, dtype=np.float64)
    *lead, t_, c, h, w = clip.shape
    if h % patch or w % patch:
        raise RejectedInput(f"image {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = clip.reshape(*lead, t_, c, hp, patch, wp, patch)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5)
    return np.ascontiguousarray(x.reshape(*lead, t_, hp * wp, c * patch * patch))


def patchify(clip, params: VideoEncoderParams, config: EncoderConfig, d0: int) -> Tensor:
    """Clip ``(..., T, C, H, W)`` -> tokens ``(..., T*N + 1, d0)``, cls first."""
    if d0 not in config.allowed_widths:
        raise RejectedInput(f"width {d0} not in allowed set {config.allowed_widths}")
    patches = flatten_patches(clip, config.patch)
    *lead, t_, n_, _ = patches.shape
    if t_ > config.max_frames:
        raise RejectedInput(f"clip has {t_} frames; encoder supports at most "
                            f"{config.max_frames}")
    if n_ != config.tokens_per_frame:
        raise RejectedInput(f"clip gives {n_} patches per frame, expected "
                            f"{config.tokens_per_frame}")
    x = adaptive_linear(params.patch_proj, Tensor(patches), d0, patches.shape[-1])
    x = x + params.pos_space[:n_, :d0]
    x = x + params.pos_time[:t_, :d0].reshape(t_, 1, d0)
    x = x.reshape(*lead, t_ * n_, d0)
    cls = T.broadcast_to(params.cls[:d0], (*lead, 1, d0))
    return T.concat([cls, x], axis=-2)


def run_layers(x: Tensor, params: VideoEncoderParams, schedule, grid_dims,
               has_cls=True, allowed=None, mode="space-time") -> Tensor:
    widths = getattr(schedule, "widths", schedule)
    prev = x.shape[-1]
    for i, (layer, d) in enumerate(zip(params.layers, widths)):
        x = transition(x, prev, d, allowed)
        with flop_scope(f"layer{i}"):
            x = adaptive_layer_forward(layer, x, d, mode, grid_dims, has_cls)
        prev = d
    return x


def encode(params: VideoEncoderParams, config: EncoderConfig, clip,
           schedule: DimSchedule) -> Tensor:
    """Embed a clip (or batch of clips) as unit-norm ``(..., E)`` vectors."""
    schedule.validate(config)
    x = patchify(clip, params, config, schedule.widths[0])
    t_ = np.shape(clip)[-4]
    x = run_layers(x, params, schedule, (t_, config.tokens_per_frame),
                   allowed=config.allowed_widths)
    d_last = schedule.widths[-1]
    x = adaptive_layernorm(params.final_norm, x, d_last)
    cls = x[..., 0, :]
    emb = adaptive_linear(params.head, cls, config.embed_dim, d_last)
    return T.l2_normalize(emb)


def embed_clips(params, config, clips, schedule, batch_size: int = 32) -> np.ndarray:
    """Gradient-free batched :func:`encode` returning a numpy array."""
    clips = np.asarray(clips)
    out = []
    with T.no_grad():
        for i in range(0, len(clips), batch_size):
            out.append(encode(params, config, clips[i:i + batch_size], schedule).data)
    return np.concatenate(out, axis=0)
