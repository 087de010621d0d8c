"""Post-norm transformer encoder shared by all modality branches."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, PreconditionError, ShapeError
from .tensor import Rng, Tensor

# additive bias for padded keys; exp() of it underflows to exactly 0
MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: Optional[int] = None
    dropout_p: float = 0.3
    max_seq_len: int = 64
    positional: bool = True

    def __post_init__(self):
        if self.model_dim <= 0 or self.model_dim % 2:
            raise ConfigError(f"model_dim must be a positive even integer, got {self.model_dim}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.num_heads <= 0 or self.model_dim % self.num_heads:
            raise ConfigError(f"num_heads ({self.num_heads}) must divide model_dim ({self.model_dim})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.max_seq_len <= 0:
            raise ConfigError(f"max_seq_len must be positive, got {self.max_seq_len}")
        if self.ff_dim is not None and self.ff_dim <= 0:
            raise ConfigError(f"ff_dim must be positive, got {self.ff_dim}")

    @property
    def ffn_dim(self) -> int:
        return self.ff_dim or 4 * self.model_dim


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape or (fan_in, fan_out), -bound, bound)


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def init_attention(rng: Rng, dim: int) -> Dict[str, Tensor]:
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = _param(xavier_uniform(rng, dim, dim))
        p["b" + name[1]] = _param(np.zeros(dim))
    return p


def init_encoder_layer(rng: Rng, cfg: EncoderConfig) -> Dict[str, Tensor]:
    d, f = cfg.model_dim, cfg.ffn_dim
    p = init_attention(rng, d)
    p["w1"] = _param(xavier_uniform(rng, d, f))
    p["b1"] = _param(np.zeros(f))
    p["w2"] = _param(xavier_uniform(rng, f, d))
    p["b2"] = _param(np.zeros(d))
    p["ln1_g"] = _param(np.ones(d))
    p["ln1_b"] = _param(np.zeros(d))
    p["ln2_g"] = _param(np.ones(d))
    p["ln2_b"] = _param(np.zeros(d))
    return p


def init_encoder(rng: Rng, cfg: EncoderConfig) -> Dict[str, Tensor]:
    """Flat parameter dict with keys ``"{layer}.{name}"``."""
    params = {}
    for i in range(cfg.num_layers):
        for name, t in init_encoder_layer(rng, cfg).items():
            params[f"{i}.{name}"] = t
    return params


def mask_bias(mask, dtype) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise PreconditionError("every sequence needs at least one unmasked position")
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_k) + bias) v over the last two axes.

    ``mask`` is boolean with the key-length as its last axis (true = valid) and
    broadcasts against the score tensor's leading axes.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != k.shape[-2]:
            raise ShapeError(f"mask length {mask.shape[-1]} does not match key length {k.shape[-2]}")
        scores = scores + Tensor(mask_bias(mask, scores.dtype)[..., None, :], dtype=scores.dtype)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return T.transpose(x.reshape(b, l, heads, d // heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dk = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(b, l, h * dk)


def multi_head_attention(x: Tensor, p: Dict[str, Tensor], heads: int, mask=None,
                         context: Optional[Tensor] = None) -> Tensor:
    """Multi-head attention of ``x`` [B, L, d] over ``context`` (defaults to ``x``)."""
    ctx = x if context is None else context
    q = _split_heads(x @ p["wq"] + p["bq"], heads)
    k = _split_heads(ctx @ p["wk"] + p["bk"], heads)
    v = _split_heads(ctx @ p["wv"] + p["bv"], heads)
    head_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
    attended = scaled_dot_product_attention(q, k, v, head_mask)
    return _merge_heads(attended) @ p["wo"] + p["bo"]


def encoder_layer(x: Tensor, p: Dict[str, Tensor], cfg: EncoderConfig, mask, training: bool,
                  rng: Optional[Rng]) -> Tensor:
    a = multi_head_attention(x, p, cfg.num_heads, mask)
    x = T.layer_norm(x + T.dropout(a, cfg.dropout_p, training, rng), p["ln1_g"], p["ln1_b"])
    h = T.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
    return T.layer_norm(x + T.dropout(h, cfg.dropout_p, training, rng), p["ln2_g"], p["ln2_b"])


def encoder_forward(cfg: EncoderConfig, params: Dict[str, Tensor], x: Tensor, mask=None,
                    training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Run ``cfg.num_layers`` encoder layers over ``x`` [B, L, model_dim] (or [L, model_dim])."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    if x.ndim != 3 or x.shape[-1] != cfg.model_dim:
        raise ShapeError(f"encoder expects [..., L, {cfg.model_dim}] input, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")
    for i in range(cfg.num_layers):
        layer = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith(f"{i}.")}
        x = encoder_layer(x, layer, cfg, mask, training, rng)
    return x.reshape(x.shape[1:]) if squeeze else x


_pe_cache: Dict[tuple, np.ndarray] = {}


def positional_table(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even channels, cos on odd channels (float64)."""
    key = (length, dim)
    if key not in _pe_cache:
        pos = np.arange(length, dtype=np.float64)[:, None]
        freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
        table = np.zeros((length, dim))
        table[:, 0::2] = np.sin(pos * freq)
        table[:, 1::2] = np.cos(pos * freq)
        table.setflags(write=False)
        _pe_cache[key] = table
    return _pe_cache[key]


def add_positional_encoding(x: Tensor, max_seq_len: int) -> Tensor:
    length, dim = x.shape[-2], x.shape[-1]
    if length > max_seq_len:
        raise ShapeError(f"sequence length {length} exceeds max_seq_len {max_seq_len}")
    return x + Tensor(positional_table(length, dim), dtype=x.dtype)


def cls_pool(seq: Tensor) -> Tensor:
    """Row 0 of the sequence axis (the [CLS] slot)."""
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise PreconditionError(f"cls_pool needs a non-empty sequence, got shape {seq.shape}")
    return T.take(seq, 0, axis=seq.ndim - 2)


def mean_pool(seq: Tensor, mask=None) -> Tensor:
    """Mean over valid positions of ``seq`` [B, L, d] (or [L, d])."""
    squeeze = seq.ndim == 2
    if squeeze:
        seq = seq.reshape(1, *seq.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    if mask is None:
        mask = np.ones(seq.shape[:2], dtype=bool)
    out = T.masked_mean(seq, mask)
    return out.reshape(out.shape[1:]) if squeeze else out
