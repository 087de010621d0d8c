"""Early fusion of the text, audio and visual embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .modality import ModalityEmbedding
from .tensor import Rng, Tensor
from .transformer import init_attention, multi_head_attention

FUSION_MODES = ("concat", "cross_attention")


@dataclass
class FusedRepresentation:
    vector: Tensor
    mode: str


def fused_dim(model_dim: int, mode: str) -> int:
    if mode == "concat":
        return 3 * model_dim
    if mode == "cross_attention":
        return model_dim
    raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def concat(h_text: Tensor, h_audio: Tensor, h_visual: Tensor) -> Tensor:
    """[text ; audio ; visual] along the last axis."""
    if not (h_text.shape == h_audio.shape == h_visual.shape):
        raise ShapeError(f"embedding shapes differ: {h_text.shape}, {h_audio.shape}, {h_visual.shape}")
    return T.concat([h_text, h_audio, h_visual], axis=-1)


def concat_fuse(h_text: ModalityEmbedding, h_audio: ModalityEmbedding, h_visual: ModalityEmbedding) -> FusedRepresentation:
    tags = (h_text.modality, h_audio.modality, h_visual.modality)
    if tags != ("text", "audio", "visual"):
        raise ValueError(f"embeddings must be ordered text, audio, visual; got {tags}")
    return FusedRepresentation(concat(h_text.vector, h_audio.vector, h_visual.vector), "concat")


def init_cross_attention(rng: Rng, model_dim: int, layers: int = 1) -> Dict[str, Tensor]:
    params = {}
    for i in range(layers):
        for name, t in init_attention(rng, model_dim).items():
            params[f"{i}.{name}"] = t
        params[f"{i}.ln_g"] = Tensor(np.ones(model_dim), requires_grad=True)
        params[f"{i}.ln_b"] = Tensor(np.zeros(model_dim), requires_grad=True)
    return params


def cross_attention(h_text: Tensor, h_audio: Tensor, h_visual: Tensor, params: Dict[str, Tensor],
                    num_heads: int, dropout_p: float = 0.0, training: bool = False,
                    rng: Optional[Rng] = None) -> Tensor:
    """Each modality token attends over all three; blocks are post-norm; output is the token mean.

    Inputs are [B, d]; output is [B, d].
    """
    if not (h_text.shape == h_audio.shape == h_visual.shape):
        raise ShapeError(f"embedding shapes differ: {h_text.shape}, {h_audio.shape}, {h_visual.shape}")
    x = T.stack([h_text, h_audio, h_visual], axis=1)
    layers = sorted({int(k.split(".")[0]) for k in params})
    for i in layers:
        p = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith(f"{i}.")}
        a = multi_head_attention(x, p, num_heads)
        x = T.layer_norm(x + T.dropout(a, dropout_p, training, rng), p["ln_g"], p["ln_b"])
    return T.tensor_mean(x, axis=1)


def cross_attention_fuse(h_text: ModalityEmbedding, h_audio: ModalityEmbedding, h_visual: ModalityEmbedding,
                         params: Dict[str, Tensor], num_heads: int, training: bool = False,
                         rng: Optional[Rng] = None, dropout_p: float = 0.0) -> FusedRepresentation:
    vecs = [e.vector.reshape(1, -1) if e.vector.ndim == 1 else e.vector for e in (h_text, h_audio, h_visual)]
    out = cross_attention(*vecs, params, num_heads, dropout_p, training, rng)
    if h_text.vector.ndim == 1:
        out = out.reshape(out.shape[-1])
    return FusedRepresentation(out, "cross_attention")
