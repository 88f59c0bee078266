import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adavid.rng import Rng
from adavid.tensor import RejectedInput
from adavid.text import (CLS, PAD, UNK, TextConfig, TextEncoderParams, Vocab, embed_texts,
                         encode_text, tokenize, tokenize_batch)

VOCAB = Vocab({"<pad>": 0, "<unk>": 1, "<cls>": 2, "open": 3, "the": 4, "drawer": 5})
CFG = TextConfig(layers=2, width=32, heads=4, max_len=16, embed_dim=8, vocab_size=6)


def test_tokenize_examples():
    ids, mask = tokenize("Open the Drawer", VOCAB, 8)
    assert ids == [2, 3, 4, 5, 0, 0, 0, 0]
    assert mask == [1, 1, 1, 1, 0, 0, 0, 0]
    assert tokenize("", VOCAB, 4) == ([CLS, PAD, PAD, PAD], [1, 0, 0, 0])
    assert tokenize("open sesame", VOCAB, 4)[0] == [CLS, 3, UNK, PAD]


def test_tokenize_truncates_and_splits_punctuation():
    ids, mask = tokenize("open,the;drawer!", VOCAB, 3)
    assert ids == [2, 3, 4] and mask == [1, 1, 1]


def test_tokenize_rejects_short_max_len():
    with pytest.raises(RejectedInput):
        tokenize("open", VOCAB, 1)


def test_vocab_round_trip():
    v = Vocab.build(["b a", "c a"])
    assert v.token_to_id == {"<pad>": 0, "<unk>": 1, "<cls>": 2, "a": 3, "b": 4, "c": 5}
    text = v.to_text()
    assert text.splitlines()[3] == "a\t3"
    assert Vocab.from_text(text) == v
    with pytest.raises(RejectedInput):
        Vocab.from_text("a\t0\nb\t2\n")


def embed(params, texts, max_len=16, cfg=CFG):
    ids, mask = tokenize_batch(texts, VOCAB, max_len)
    return encode_text(params, cfg, ids, mask).data


def test_identical_strings_identical_embeddings():
    p = TextEncoderParams.init(CFG, 0)
    e = embed(p, ["open the drawer", "open the drawer"])
    assert float(e[0] @ e[1]) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(["open", "the", "drawer", "zzz"]), max_size=6),
       st.integers(0, 100))
def test_padding_length_invariance(words, seed):
    p = TextEncoderParams.init(CFG, seed)
    text = " ".join(words)
    assert np.allclose(embed(p, [text], 8), embed(p, [text], 16), rtol=0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100), st.lists(st.integers(0, 5), min_size=12, max_size=12))
def test_pad_ids_have_no_influence(seed, junk):
    p = TextEncoderParams.init(CFG, seed)
    ids, mask = tokenize_batch(["open the drawer"], VOCAB, 16)
    base = encode_text(p, CFG, ids, mask).data
    ids[0, 4:] = junk
    assert np.array_equal(encode_text(p, CFG, ids, mask).data, base)


def test_id_overflow_rejected():
    p = TextEncoderParams.init(CFG, 0)
    ids, mask = tokenize_batch(["open"], VOCAB, 4)
    ids[0, 1] = 6
    with pytest.raises(RejectedInput):
        encode_text(p, CFG, ids, mask)


def test_deterministic_given_seed():
    a = embed_texts(TextEncoderParams.init(CFG, 3), CFG, VOCAB, ["the drawer"])
    b = embed_texts(TextEncoderParams.init(CFG, 3), CFG, VOCAB, ["the drawer"])
    assert np.array_equal(a, b)
    c = embed_texts(TextEncoderParams.init(CFG, 4), CFG, VOCAB, ["the drawer"])
    assert not np.array_equal(a, c)
