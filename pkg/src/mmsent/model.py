"""Full pipeline: three modality encoders, early fusion, classification head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import ConfigError
from .fusion import FUSION_MODES, concat, cross_attention, fused_dim, init_cross_attention
from .head import NUM_CLASSES, head_forward, init_head
from .modality import Vocabulary, encode_continuous, encode_text
from .tensor import Rng, Tensor
from .transformer import EncoderConfig, init_encoder, xavier_uniform


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion_mode: str = "concat"
    fusion_layers: int = 1
    hidden_dim: Optional[int] = None
    head_dropout: float = 0.3
    audio_dim: int = 74
    visual_dim: int = 35

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion.mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.fusion_layers < 1:
            raise ConfigError(f"fusion_layers must be >= 1, got {self.fusion_layers}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must be in [0, 1), got {self.head_dropout}")
        if self.hidden_dim is not None and self.hidden_dim <= 0:
            raise ConfigError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.audio_dim <= 0 or self.visual_dim <= 0:
            raise ConfigError("audio_dim and visual_dim must be positive")

    @property
    def model_dim(self) -> int:
        return self.encoder.model_dim

    @property
    def head_hidden(self) -> int:
        return self.hidden_dim or self.model_dim

    @property
    def fused_dim(self) -> int:
        return fused_dim(self.model_dim, self.fusion_mode)

    @classmethod
    def quickstart(cls, **overrides) -> "ModelConfig":
        return cls(encoder=EncoderConfig(model_dim=64, num_layers=2, num_heads=4), **overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(encoder=EncoderConfig(model_dim=128, num_layers=8, num_heads=16), **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        try:
            return cls(encoder=EncoderConfig(**enc), **d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None


class SentimentModel:
    """Parameters live in one ordered dict keyed by dotted names.

    Each modality branch owns its own encoder; nothing is shared between them.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 42):
        self.config = config
        self.vocab = vocab
        self.dtype = T.get_default_dtype()
        rng = Rng(seed).derive(0xC0FFEE)
        enc = config.encoder
        d = enc.model_dim
        p: Dict[str, Tensor] = {}
        p["text.embed"] = Tensor(xavier_uniform(rng, len(vocab), d), requires_grad=True)
        p.update({f"text.enc.{k}": v for k, v in init_encoder(rng, enc).items()})
        for name, dim in (("audio", config.audio_dim), ("visual", config.visual_dim)):
            p[f"{name}.proj.w"] = Tensor(xavier_uniform(rng, dim, d), requires_grad=True)
            p[f"{name}.proj.b"] = Tensor(np.zeros(d), requires_grad=True)
            p.update({f"{name}.enc.{k}": v for k, v in init_encoder(rng, enc).items()})
        if config.fusion_mode == "cross_attention":
            p.update({f"fusion.{k}": v for k, v in init_cross_attention(rng, d, config.fusion_layers).items()})
        p.update({f"head.{k}": v for k, v in init_head(rng, config.fused_dim, config.head_hidden).items()})
        self.params = p

    # ------------------------------------------------------------------ #

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def group(self, prefix: str) -> Dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k}: shape {v.shape} != expected {self.params[k].shape}")
            self.params[k].data[...] = v

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # ------------------------------------------------------------------ #

    def embed(self, batch: Batch, training: bool = False, rng: Optional[Rng] = None) -> Tuple[Tensor, Tensor, Tensor]:
        enc = self.config.encoder
        h_text = encode_text(batch.text_ids, batch.text_mask, self.params["text.embed"],
                             self.group("text.enc"), enc, training, rng)
        out = [h_text]
        for name, feats, mask in (("audio", batch.audio, batch.audio_mask), ("visual", batch.visual, batch.visual_mask)):
            out.append(encode_continuous(Tensor(feats, dtype=self.dtype), mask, self.params[f"{name}.proj.w"],
                                         self.params[f"{name}.proj.b"], self.group(f"{name}.enc"), enc, training, rng))
        return tuple(out)

    def fuse(self, h_text: Tensor, h_audio: Tensor, h_visual: Tensor, training: bool = False,
             rng: Optional[Rng] = None) -> Tensor:
        if self.config.fusion_mode == "concat":
            return concat(h_text, h_audio, h_visual)
        return cross_attention(h_text, h_audio, h_visual, self.group("fusion"), self.config.encoder.num_heads,
                               self.config.encoder.dropout_p, training, rng)

    def forward(self, batch: Batch, training: bool = False, rng: Optional[Rng] = None,
                trace: Optional[Dict[str, tuple]] = None) -> Tensor:
        """Logits [B, 7]. When ``trace`` is a dict it receives the shape of every stage."""
        h_text, h_audio, h_visual = self.embed(batch, training, rng)
        fused = self.fuse(h_text, h_audio, h_visual, training, rng)
        logits = head_forward(fused, self.group("head"), self.config.head_dropout, training, rng)
        if trace is not None:
            trace.update(text_ids=batch.text_ids.shape, audio=batch.audio.shape, visual=batch.visual.shape,
                         h_text=h_text.shape, h_audio=h_audio.shape, h_visual=h_visual.shape,
                         fused=fused.shape, logits=logits.shape)
        return logits

    def loss(self, batch: Batch, training: bool = False, rng: Optional[Rng] = None) -> Tensor:
        return T.cross_entropy(self.forward(batch, training, rng), batch.labels)

    def predict_proba(self, batch: Batch) -> np.ndarray:
        return T._softmax_np(self.forward(batch).data.astype(np.float64), -1)


__all__ = ["ModelConfig", "SentimentModel", "NUM_CLASSES"]
