"""Parameter bundles and their checkpoint round-trip."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import io
from .aggregator import AggregatorConfig, AggregatorParams
from .layers import named_parameters
from .text import TextConfig, TextEncoderParams, Vocab, embed_texts
from .video import EncoderConfig, VideoEncoderParams, embed_clips


def state_dict(params, prefix: str) -> dict:
    return {f"{prefix}.{name}": t.data.copy() for name, t in named_parameters(params)}


def load_state(params, tensors: dict, prefix: str) -> None:
    for name, t in named_parameters(params):
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise io.FormatError(f"checkpoint is missing tensor {key}")
        if tensors[key].shape != t.shape:
            raise io.FormatError(f"{key}: shape {tensors[key].shape} != {t.shape}")
        t.data = np.array(tensors[key])


def _typed(cls, raw: dict, prefix: str):
    kwargs = {}
    for name, f in cls.__dataclass_fields__.items():
        key = f"{prefix}.{name}"
        if key in raw:
            kwargs[name] = type(f.default)(raw[key])
    return cls(**kwargs)


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


@dataclass
class DualEncoder:
    video_config: EncoderConfig
    video: VideoEncoderParams
    text_config: TextConfig
    text: TextEncoderParams
    vocab: Vocab

    @classmethod
    def init(cls, video_config, text_config, vocab, seed=0):
        return cls(video_config, VideoEncoderParams.init(video_config, seed),
                   text_config, TextEncoderParams.init(text_config, seed), vocab)

    def embed_videos(self, clips, schedule) -> np.ndarray:
        return embed_clips(self.video, self.video_config, clips, schedule)

    def embed_texts(self, texts) -> np.ndarray:
        return embed_texts(self.text, self.text_config, self.vocab, list(texts))

    def tensors(self) -> dict:
        return {**state_dict(self.video, "video"), **state_dict(self.text, "text")}

    def config(self) -> dict:
        return {**_prefixed("video", self.video_config.to_dict()),
                **_prefixed("text", self.text_config.to_dict())}

    def save(self, path, extra: dict | None = None) -> None:
        io.save_checkpoint(path, {**self.config(), **(extra or {})}, self.tensors(),
                           {"vocab": self.vocab.to_text()})

    @classmethod
    def load(cls, path) -> "DualEncoder":
        raw, tensors, blobs = io.load_checkpoint(path)
        vcfg = _typed(EncoderConfig, raw, "video")
        tcfg = _typed(TextConfig, raw, "text")
        model = cls.init(vcfg, tcfg, Vocab.from_text(blobs["vocab"]))
        load_state(model.video, tensors, "video")
        load_state(model.text, tensors, "text")
        return model

    def copy(self) -> "DualEncoder":
        return copy.deepcopy(self)


@dataclass
class LongVideoModel:
    """Aggregator plus the summary-text tower trained alongside it.

    ``agg`` is ``None`` for the mean-pool baseline.
    """

    agg_config: AggregatorConfig
    agg: AggregatorParams | None
    text_config: TextConfig
    text: TextEncoderParams
    vocab: Vocab
    pooling: str = "transformer"

    def embed_texts(self, texts) -> np.ndarray:
        return embed_texts(self.text, self.text_config, self.vocab, list(texts))

    def embed_features(self, feats) -> np.ndarray:
        from . import tensor as T
        from .aggregator import aggregate, mean_pool
        if self.pooling == "mean":
            return mean_pool(feats)
        with T.no_grad():
            return aggregate(self.agg, self.agg_config, np.asarray(feats)).data

    def save(self, path, extra: dict | None = None) -> None:
        cfg = {**_prefixed("agg", self.agg_config.to_dict()),
               **_prefixed("text", self.text_config.to_dict()),
               "pooling": self.pooling, **(extra or {})}
        tensors = state_dict(self.text, "text")
        if self.agg is not None:
            tensors.update(state_dict(self.agg, "agg"))
        io.save_checkpoint(path, cfg, tensors, {"vocab": self.vocab.to_text()})

    @classmethod
    def load(cls, path) -> "LongVideoModel":
        raw, tensors, blobs = io.load_checkpoint(path)
        acfg = _typed(AggregatorConfig, raw, "agg")
        tcfg = _typed(TextConfig, raw, "text")
        pooling = raw.get("pooling", "transformer")
        text = TextEncoderParams.init(tcfg)
        load_state(text, tensors, "text")
        agg = None
        if pooling != "mean":
            agg = AggregatorParams.init(acfg)
            load_state(agg, tensors, "agg")
        return cls(acfg, agg, tcfg, text, Vocab.from_text(blobs["vocab"]), pooling)
