"""Per-modality branches: tokenization, feature sanitization and pooled embeddings."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import tensor as T
from .errors import DataError, PreconditionError, ShapeError
from .tensor import Rng, Tensor
from .transformer import EncoderConfig, add_positional_encoding, cls_pool, encoder_forward, mean_pool

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
MODALITIES = ("text", "audio", "visual")

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass
class Vocabulary:
    tokens: List[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise DataError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary tokens must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, int]) -> "Vocabulary":
        """Build from an explicit token->id table; unused ids are filled with placeholders."""
        size = max([3, *mapping.values()]) + 1
        tokens = list(RESERVED) + [f"[unused{i}]" for i in range(4, size)]
        for tok, i in mapping.items():
            if i < 4:
                raise DataError(f"token {tok!r} would overwrite reserved id {i}")
            tokens[i] = tok
        return cls(tokens)

    def to_list(self) -> List[str]:
        return list(self.tokens)


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation; punctuation is dropped."""
    return _WORD.findall(text.lower())


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray


def tokenize(text: str, vocab: Vocabulary, max_len: int = 64) -> TokenSequence:
    if max_len < 3:
        raise PreconditionError(f"max_len must be >= 3, got {max_len}")
    words = split_words(text)[: max_len - 2]
    ids = np.array([CLS, *(vocab.id(w) for w in words), SEP], dtype=np.int64)
    return TokenSequence(ids, np.ones(len(ids), dtype=bool))


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Tokens with count >= min_count, ordered by descending count then lexicographically."""
    corpus = list(corpus)
    if not corpus:
        raise PreconditionError("build_vocab needs a non-empty corpus")
    counts = Counter(w for line in corpus for w in split_words(line))
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept)


def sanitize_features(raw, bound: float = 1e4) -> np.ndarray:
    """Replace NaN with 0 and clamp everything (including +-Inf) to [-bound, bound]."""
    arr = np.array(raw, dtype=np.float64, copy=True)
    arr[np.isnan(arr)] = 0.0
    np.clip(arr, -bound, bound, out=arr)
    return arr


@dataclass
class ModalityEmbedding:
    vector: Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


def encode_text(ids, mask, embed: Tensor, encoder_params: Dict[str, Tensor], cfg: EncoderConfig,
                training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Token ids [B, L] -> [B, model_dim] via lookup, positions, encoder, [CLS] pooling."""
    ids = np.asarray(ids)
    if ids.size and ids.max() >= embed.shape[0]:
        raise IndexError(f"token id {int(ids.max())} out of range for vocabulary of {embed.shape[0]}")
    x = T.embedding(embed, ids)
    if cfg.positional:
        x = add_positional_encoding(x, cfg.max_seq_len)
    h = encoder_forward(cfg, encoder_params, x, mask, training, rng)
    return cls_pool(h)


def encode_continuous(features, mask, proj_w: Tensor, proj_b: Tensor, encoder_params: Dict[str, Tensor],
                      cfg: EncoderConfig, training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Frames [B, T, D] -> [B, model_dim] via per-frame projection, positions, encoder, mean pooling."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.shape[-1] != proj_w.shape[0]:
        raise ShapeError(f"feature dim {feats.shape[-1]} does not match projection input {proj_w.shape[0]}")
    if not np.isfinite(feats.data).all():
        raise DataError("non-finite feature values; run sanitize_features first")
    x = feats @ proj_w + proj_b
    if cfg.positional:
        x = add_positional_encoding(x, cfg.max_seq_len)
    h = encoder_forward(cfg, encoder_params, x, mask, training, rng)
    return mean_pool(h, mask)


def embed_single_text(text: str, vocab: Vocabulary, embed: Tensor, encoder_params, cfg: EncoderConfig) -> ModalityEmbedding:
    seq = tokenize(text, vocab, cfg.max_seq_len)
    out = encode_text(seq.ids[None], seq.mask[None], embed, encoder_params, cfg)
    return ModalityEmbedding(out.reshape(cfg.model_dim), "text")


def embed_single_continuous(frames, modality: str, proj_w: Tensor, proj_b: Tensor, encoder_params,
                            cfg: EncoderConfig) -> ModalityEmbedding:
    frames = np.asarray(frames)
    mask = np.ones((1, frames.shape[0]), dtype=bool)
    out = encode_continuous(Tensor(frames[None]), mask, proj_w, proj_b, encoder_params, cfg)
    return ModalityEmbedding(out.reshape(cfg.model_dim), modality)
