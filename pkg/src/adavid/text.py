"""Fixed-width text encoder over a closed word vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .layers import (LayerNormParams, LayerParams, LinearParams, adaptive_layer_forward,
                     residual_scale,
                     adaptive_layernorm, adaptive_linear)
from .rng import Rng
from .tensor import RejectedInput, Tensor

PAD, UNK, CLS = 0, 1, 2
_RESERVED = {"<pad>": PAD, "<unk>": UNK, "<cls>": CLS}
_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocab:
    token_to_id: dict

    @classmethod
    def build(cls, texts) -> "Vocab":
        table = dict(_RESERVED)
        for w in sorted({w for t in texts for w in words(t)}):
            table[w] = len(table)
        return cls(table)

    def __len__(self):
        return len(self.token_to_id)

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)

    def to_text(self) -> str:
        items = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return "".join(f"{tok}\t{i}\n" for tok, i in items)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        table = {}
        for line in text.splitlines():
            if line:
                tok, i = line.rsplit("\t", 1)
                table[tok] = int(i)
        if sorted(table.values()) != list(range(len(table))):
            raise RejectedInput("vocab ids are not dense")
        return cls(table)


def tokenize(text: str, vocab: Vocab, max_len: int):
    """Return ``(ids, mask)`` lists of length ``max_len``, cls first."""
    if max_len < 2:
        raise RejectedInput("max_len must be at least 2")
    ids = [CLS] + [vocab.lookup(w) for w in words(text)]
    ids = ids[:max_len]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    return ids + [PAD] * (max_len - len(ids)), mask


def tokenize_batch(texts, vocab: Vocab, max_len: int):
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    return (np.array([p[0] for p in pairs], dtype=np.int64),
            np.array([p[1] for p in pairs], dtype=bool))


@dataclass
class TextConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    max_len: int = 16
    embed_dim: int = 32
    vocab_size: int = 64

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TextEncoderParams:
    tok_emb: Tensor  # (V, W)
    pos: Tensor  # (max_len, W)
    layers: list
    final_norm: LayerNormParams
    head: LinearParams  # (E, W)

    @classmethod
    def init(cls, config: TextConfig, seed: int = 0):
        rng = Rng(seed).child("text-encoder")
        W = config.width
        return cls(
            tok_emb=Tensor(rng.child("tok").normal((config.vocab_size, W), 1.0),
                           requires_grad=True),
            pos=Tensor(rng.child("pos").normal((config.max_len, W), 0.1), requires_grad=True),
            layers=[LayerParams.init(rng.child(f"layer{i}"), W, config.head_dim,
                                     out_scale=residual_scale(config.layers))
                    for i in range(config.layers)],
            final_norm=LayerNormParams.init(W),
            head=LinearParams.init(rng.child("head"), config.embed_dim, W, nest="none"),
        )


def encode_text(params: TextEncoderParams, config: TextConfig, ids, mask) -> Tensor:
    """Token ids ``(B, L)`` plus keep-mask -> unit-norm ``(B, E)`` embeddings."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise RejectedInput("ids and mask must both be (B, L)")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise RejectedInput(f"token id outside vocabulary of size {config.vocab_size}")
    if ids.shape[1] > config.max_len:
        raise RejectedInput(f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
    if not mask.any(axis=1).all():
        raise RejectedInput("every row needs at least one real token")
    W = config.width
    x = params.tok_emb[ids] + params.pos[:ids.shape[1]]
    for layer in params.layers:
        x = adaptive_layer_forward(layer, x, W, "plain", key_mask=mask)
    x = adaptive_layernorm(params.final_norm, x, W)
    return T.l2_normalize(adaptive_linear(params.head, x[:, 0, :], config.embed_dim, W))


def embed_texts(params, config, vocab, texts, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(texts), batch_size):
            ids, mask = tokenize_batch(texts[i:i + batch_size], vocab, config.max_len)
            out.append(encode_text(params, config, ids, mask).data)
    return np.concatenate(out, axis=0)
