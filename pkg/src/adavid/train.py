"""Contrastive training of the dual encoder and of the long-video aggregator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .aggregator import AggregatorConfig, AggregatorParams, aggregate, mean_pool
from .layers import parameters
from .model import DualEncoder, LongVideoModel
from .rng import Rng
from .tensor import RejectedInput, Tensor
from .text import TextConfig, Vocab, encode_text, tokenize_batch
from .video import DimSchedule, EncoderConfig, encode, named_schedule

log = logging.getLogger(__name__)

STRATEGIES = ("decreasing", "increasing", "unconstrained")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 50
    steps: int = 0  # overrides epochs when > 0
    lr: float = 1e-5
    weight_decay: float = 0.1
    temperature: float = 0.05
    seed: int = 0
    strategy: str = "decreasing"  # decreasing | increasing | unconstrained | fixed:<name>

    def __post_init__(self):
        if self.temperature <= 0:
            raise RejectedInput("temperature must be positive")
        if self.batch_size < 2:
            raise RejectedInput("contrastive training needs batch_size >= 2")
        if self.strategy not in STRATEGIES and not self.strategy.startswith("fixed:"):
            raise RejectedInput(f"unknown strategy {self.strategy!r}")

    def total_steps(self, n_examples: int) -> int:
        if self.steps > 0:
            return self.steps
        return self.epochs * math.ceil(n_examples / self.batch_size)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.weight_decay = lr, weight_decay
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            data = p.data
            if self.weight_decay:
                data = data * (1 - self.lr * self.weight_decay)
            p.data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def info_nce(video: Tensor, text: Tensor, temperature: float) -> Tensor:
    """Symmetric cross-entropy over ``video @ text.T / temperature``."""
    if temperature <= 0:
        raise RejectedInput("temperature must be positive")
    if video.shape != text.shape or video.ndim != 2:
        raise RejectedInput(f"embedding shapes differ: {video.shape} vs {text.shape}")
    for name, e in (("video", video), ("text", text)):
        norms = np.linalg.norm(e.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise RejectedInput(f"{name} embeddings are not unit-norm")
    B = video.shape[0]
    if B == 1:
        return Tensor(0.0)
    logits = (video @ text.T) * (1.0 / temperature)
    diag = (np.arange(B), np.arange(B))
    rows = T.log_softmax(logits)[diag].sum()
    cols = T.log_softmax(logits.T)[diag].sum()
    return (rows + cols) * (-0.5 / B)


def sample_schedule(strategy: str, config: EncoderConfig, rng: Rng,
                    allowed=None) -> DimSchedule:
    """Draw per-layer widths: i.i.d. uniform over the allowed set, then sorted
    for the monotone strategies. ``allowed`` narrows the config's set."""
    if strategy.startswith("fixed:"):
        return named_schedule(strategy[6:], config)
    if strategy not in STRATEGIES:
        raise RejectedInput(f"unknown strategy {strategy!r}")
    allowed = np.array(config.allowed_widths if allowed is None else allowed)
    if not set(allowed.tolist()) <= set(config.allowed_widths):
        raise RejectedInput(f"widths {sorted(set(allowed.tolist()))} not all in "
                            f"{config.allowed_widths}")
    widths = allowed[rng.integers(0, len(allowed), size=config.layers)]
    if strategy == "decreasing":
        widths = np.sort(widths)[::-1]
    elif strategy == "increasing":
        widths = np.sort(widths)
    return DimSchedule(tuple(int(w) for w in widths))


def build_vocab(dataset) -> Vocab:
    return Vocab.build(dataset.texts)


def _batches(n: int, batch_size: int, rng: Rng):
    """Endless stream of index batches; reshuffled each epoch, last partial batch dropped."""
    if batch_size > n:
        raise RejectedInput(f"batch_size {batch_size} exceeds the {n} training examples")
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def _class_batches(labels, batch_size: int, rng: Rng):
    """Endless stream of batches whose examples all carry distinct labels.

    Duplicate captions inside a contrastive batch act as false negatives, so
    each batch picks ``batch_size`` distinct classes and one example of each.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if batch_size > len(classes):
        raise RejectedInput(f"batch_size {batch_size} exceeds the {len(classes)} distinct "
                            "classes")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    while True:
        chosen = classes[rng.permutation(len(classes))[:batch_size]]
        yield np.array([members[c][rng.integers(0, len(members[c]))] for c in chosen])


def _check_loss(loss: Tensor, step: int, label: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"loss became {value} at step {step} (schedule {label})")
    return value


def train_encoder(config: TrainConfig, dataset, video_config: EncoderConfig | None = None,
                  text_config: TextConfig | None = None, model: DualEncoder | None = None,
                  on_step=None):
    """Returns ``(model, trace)`` where trace rows are ``(step, schedule, loss)``."""
    rng = Rng(config.seed)
    if model is None:
        video_config = video_config or EncoderConfig()
        vocab = build_vocab(dataset)
        text_config = text_config or TextConfig(vocab_size=len(vocab))
        if text_config.vocab_size < len(vocab):
            raise RejectedInput("text vocab_size smaller than the dataset vocabulary")
        model = DualEncoder.init(video_config, text_config, vocab, seed=rng.child("init").seed)
    params = parameters(model.video) + parameters(model.text)
    opt = AdamW(params, config.lr, config.weight_decay)
    ids, mask = tokenize_batch(dataset.captions, model.vocab, model.text_config.max_len)
    clips, labels = dataset.train_clips, dataset.train_labels
    batches = _class_batches(labels, config.batch_size, rng.child("batches"))
    sched_rng = rng.child("schedules")
    trace = []
    for step in range(config.total_steps(len(clips))):
        idx = next(batches)
        schedule = sample_schedule(config.strategy, model.video_config, sched_rng)
        v = encode(model.video, model.video_config, clips[idx], schedule)
        t = encode_text(model.text, model.text_config, ids[labels[idx]], mask[labels[idx]])
        loss = info_nce(v, t, config.temperature)
        value = _check_loss(loss, step, schedule.label)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        trace.append((step, schedule.label, value))
        if on_step is not None:
            on_step(step, schedule, value)
    return model, trace


# --------------------------------------------------------------- aggregator
def cache_features(encoder: DualEncoder, videos: np.ndarray, S: int, schedules) -> dict:
    """``{schedule_name: (n_videos, S, E)}`` segment embeddings from the frozen encoder."""
    n, t_long = videos.shape[:2]
    if t_long % S:
        raise RejectedInput(f"{t_long} frames cannot be split into {S} segments")
    per = t_long // S
    segs = videos.reshape(n * S, per, *videos.shape[2:])
    out = {}
    for name in schedules:
        sched = named_schedule(name, encoder.video_config)
        out[name] = encoder.embed_videos(segs, sched).reshape(n, S, -1)
    return out


def train_aggregator(config: TrainConfig, features: dict, video_seq, summaries,
                     encoder: DualEncoder, agg_config: AggregatorConfig | None = None,
                     pooling: str = "transformer", on_step=None):
    """Train aggregator + summary text tower on cached segment features.

    ``features`` maps schedule names to ``(n_videos, S, E)`` arrays; each
    training example draws one schedule uniformly. With ``pooling="mean"``
    only the text tower is trained (average-pool baseline).
    Returns ``(LongVideoModel, trace)``.
    """
    if not features:
        raise RejectedInput("feature cache is empty")
    video_seq = np.asarray(video_seq)
    names = sorted(features)
    missing = sorted({f"{name}:{i}" for name in names
                      for i in range(len(video_seq)) if i >= len(features[name])})
    if missing:
        raise KeyError(f"feature cache is missing entries: {missing}")
    rng = Rng(config.seed).child("aggregator")
    agg_config = agg_config or AggregatorConfig(embed_dim=encoder.video_config.embed_dim)
    text = encoder.copy().text  # fine-tuned copy; the encoder itself is never touched
    agg = AggregatorParams.init(agg_config, rng.child("init").seed) if pooling != "mean" else None
    model = LongVideoModel(agg_config, agg, encoder.text_config, text, encoder.vocab, pooling)
    params = parameters(text) + ([] if agg is None else parameters(agg))
    opt = AdamW(params, config.lr, config.weight_decay)
    ids, mask = tokenize_batch(list(summaries), encoder.vocab, encoder.text_config.max_len)
    stacked = np.stack([features[n] for n in names])  # (n_sched, n_videos, S, E)
    batches = _batches(len(video_seq), config.batch_size, rng.child("batches"))
    pick = rng.child("schedules")
    trace = []
    for step in range(config.total_steps(len(video_seq))):
        idx = next(batches)
        which = pick.integers(0, len(names), size=len(idx))
        feats = stacked[which, idx]
        if agg is None:
            v = Tensor(mean_pool(feats))
        else:
            v = aggregate(agg, agg_config, feats)
        seq = video_seq[idx]
        t = encode_text(text, encoder.text_config, ids[seq], mask[seq])
        loss = info_nce(v, t, config.temperature)
        label = "|".join(names[w] for w in which)
        value = _check_loss(loss, step, label)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        trace.append((step, label, value))
        if on_step is not None:
            on_step(step, label, value)
    return model, trace


def trace_csv(trace, config_hash: str, seed: int) -> str:
    lines = [f"# config_hash={config_hash} seed={seed}", "step,schedule,loss"]
    lines += [f"{s},{label},{loss!r}" for s, label, loss in trace]
    return "\n".join(lines) + "\n"
