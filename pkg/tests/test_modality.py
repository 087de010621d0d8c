import numpy as np
import pytest

from mmsent.errors import DataError, PreconditionError, ShapeError
from mmsent.modality import (CLS, PAD, SEP, UNK, Vocabulary, build_vocab, embed_single_continuous, embed_single_text,
                             encode_continuous, encode_text, sanitize_features, split_words, tokenize)
from mmsent.model import SentimentModel
from mmsent.tensor import Tensor
from mmsent.transformer import EncoderConfig, init_encoder

from conftest import tiny_config


def test_reserved_ids():
    assert (PAD, UNK, CLS, SEP) == (0, 1, 2, 3)
    v = Vocabulary()
    assert v.tokens[:4] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]


def test_tokenize_empty():
    assert tokenize("", Vocabulary()).ids.tolist() == [CLS, SEP]


def test_tokenize_lookup():
    vocab = Vocabulary.from_mapping({"good": 5, "movie": 9})
    assert tokenize("Good movie", vocab).ids.tolist() == [CLS, 5, 9, SEP]


def test_tokenize_oov_with_hyphen():
    vocab = Vocabulary.from_mapping({"good": 5, "movie": 9})
    assert tokenize("zzzqqq unknown-word", vocab).ids.tolist() == [CLS, UNK, UNK, UNK, SEP]


def test_tokenize_truncation_keeps_cls_and_sep():
    vocab = build_vocab(["a b c d e f"])
    ids = tokenize("a b c d e f", vocab, max_len=4).ids.tolist()
    assert ids[0] == CLS and ids[-1] == SEP and len(ids) == 4
    with pytest.raises(PreconditionError):
        tokenize("a", vocab, max_len=2)


def test_tokenize_idempotent_on_own_tokens():
    text = "It's GREAT, really... great!"
    words = split_words(text)
    assert split_words(" ".join(words)) == words
    vocab = build_vocab([text])
    assert tokenize(" ".join(words), vocab).ids.tolist() == tokenize(text, vocab).ids.tolist()


def test_build_vocab_min_count():
    v = build_vocab(["a a b"], min_count=2)
    assert "a" in v and "b" not in v


def test_build_vocab_deterministic():
    corpus = ["the cat sat", "the dog ran", "a cat ran"]
    assert build_vocab(corpus).tokens == build_vocab(corpus).tokens


def test_build_vocab_tie_break_lexicographic():
    v = build_vocab(["zeta alpha mid", "mid"])
    # mid (2) first, then alpha and zeta tied at 1 in lexicographic order
    assert v.tokens[4:] == ["mid", "alpha", "zeta"]
    with pytest.raises(PreconditionError):
        build_vocab([])


def test_sanitize_features():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(sanitize_features(x), x)
    y = x.copy()
    y[0, 0] = np.nan
    out = sanitize_features(y)
    assert out[0, 0] == 0 and np.array_equal(out[1:], x[1:])
    z = x.copy()
    z[1, 2] = np.inf
    z[0, 1] = -np.inf
    out = sanitize_features(z, bound=50.0)
    assert out[1, 2] == 50.0 and out[0, 1] == -50.0


def _text_setup(rng, dim=8):
    cfg = EncoderConfig(model_dim=dim, num_layers=1, num_heads=2, dropout_p=0.0, max_seq_len=16)
    vocab = build_vocab(["good movie bad plot great acting"])
    embed = Tensor(rng.normal((len(vocab), dim)), requires_grad=True)
    return cfg, vocab, embed, init_encoder(rng, cfg)


def test_encode_text_shape_and_distinct(rng):
    cfg, vocab, embed, enc = _text_setup(rng)
    a = embed_single_text("good movie", vocab, embed, enc, cfg)
    b = embed_single_text("bad plot", vocab, embed, enc, cfg)
    assert a.vector.shape == (8,) and a.modality == "text"
    assert np.linalg.norm(a.vector.data - b.vector.data) > 0


def test_encode_text_padding_tail_is_inert(rng):
    cfg, vocab, embed, enc = _text_setup(rng)
    seq = tokenize("good movie", vocab)
    ids = np.array([list(seq.ids) + [PAD, PAD]])
    mask = ids != PAD
    base = encode_text(ids, mask, embed, enc, cfg).data
    ids2 = ids.copy()
    ids2[0, -2:] = [4, 5]
    np.testing.assert_array_equal(encode_text(ids2, mask, embed, enc, cfg).data, base)
    np.testing.assert_array_equal(encode_text(seq.ids[None], seq.mask[None], embed, enc, cfg).data, base)


def test_encode_text_id_out_of_range(rng):
    cfg, vocab, embed, enc = _text_setup(rng)
    with pytest.raises(IndexError):
        encode_text(np.array([[CLS, 99, SEP]]), np.ones((1, 3), bool), embed, enc, cfg)


def test_encode_continuous_single_frame(rng):
    cfg = EncoderConfig(model_dim=8, num_layers=1, num_heads=2, dropout_p=0.0)
    enc = init_encoder(rng, cfg)
    w, b = Tensor(rng.normal((5, 8))), Tensor(rng.normal((8,)))
    frame = rng.normal((1, 5))
    out = embed_single_continuous(frame, "audio", w, b, enc, cfg)
    from mmsent.transformer import add_positional_encoding, encoder_forward
    row = encoder_forward(cfg, enc, add_positional_encoding(Tensor(frame) @ w + b, cfg.max_seq_len)).data[0]
    np.testing.assert_array_equal(out.vector.data, row)


def test_encode_continuous_zero_case(rng):
    # positional signal disabled: otherwise the embedding is the mean position code
    cfg = EncoderConfig(model_dim=8, num_layers=0, num_heads=2, positional=False)
    out = embed_single_continuous(rng.normal((6, 5)), "visual", Tensor(np.zeros((5, 8))), Tensor(np.zeros(8)), {}, cfg)
    np.testing.assert_array_equal(out.vector.data, 0.0)


def test_encode_continuous_audio_shape(rng):
    cfg = EncoderConfig(model_dim=32, num_layers=1, num_heads=4)
    enc = init_encoder(rng, cfg)
    out = embed_single_continuous(rng.normal((20, 74)), "audio", Tensor(rng.normal((74, 32))), Tensor(np.zeros(32)),
                                  enc, cfg)
    assert out.vector.shape == (32,)


def test_encode_continuous_errors(rng):
    cfg = EncoderConfig(model_dim=8, num_layers=0, num_heads=2)
    w, b = Tensor(np.zeros((5, 8))), Tensor(np.zeros(8))
    with pytest.raises(ShapeError):
        encode_continuous(Tensor(np.zeros((1, 3, 4))), np.ones((1, 3), bool), w, b, {}, cfg)
    bad = np.zeros((1, 3, 5))
    bad[0, 1] = np.nan
    with pytest.raises(DataError):
        encode_continuous(Tensor(bad), np.ones((1, 3), bool), w, b, {}, cfg)


def test_branches_share_no_parameters(small_vocab, small_batch):
    model = SentimentModel(tiny_config(), small_vocab, seed=1)
    _, audio, visual = model.embed(small_batch)
    for name, p in model.params.items():
        if name.startswith("text."):
            p.data += 0.1
    text2, audio2, visual2 = model.embed(small_batch)
    np.testing.assert_array_equal(audio2.data, audio.data)
    np.testing.assert_array_equal(visual2.data, visual.data)


def test_embeddings_finite_and_same_length(small_vocab, small_batch):
    model = SentimentModel(tiny_config(), small_vocab, seed=2)
    embs = model.embed(small_batch)
    assert {e.shape for e in embs} == {(len(small_batch), 8)}
    assert all(np.isfinite(e.data).all() for e in embs)
