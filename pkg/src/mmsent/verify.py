"""Finite-difference verification of every parameter group of a small model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .data import SynthSpec, collate, generate_synthetic
from .modality import build_vocab
from .model import ModelConfig, SentimentModel
from .tensor import Rng
from .transformer import EncoderConfig

TOLERANCE = 1e-5
STEP = 1e-5
# |grad| below this is held to an absolute error of TOLERANCE * ERROR_FLOOR
ERROR_FLOOR = 1e-4


@dataclass
class GroupResult:
    group: str
    max_rel_error: float
    worst_param: str
    coords_checked: int


@dataclass
class GradcheckReport:
    mode: str
    groups: List[GroupResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(g.max_rel_error for g in self.groups)

    @property
    def worst(self) -> GroupResult:
        return max(self.groups, key=lambda g: g.max_rel_error)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol


def param_group(name: str) -> str:
    """'text.enc.0.wq' -> 'text.enc', 'head.dense1.w' -> 'head'."""
    parts = name.split(".")
    if parts[0] in ("text", "audio", "visual"):
        return ".".join(parts[:2])
    return parts[0]


def tiny_setup(fusion_mode: str, seed: int = 7) -> Tuple[SentimentModel, object]:
    """A 2-layer, 2-head, dim-8 model and a 3-record padded batch; build inside ``precision(float64)``."""
    spec = SynthSpec(n=20, seed=seed, separability=0.5, audio_dim=5, visual_dim=4,
                     text_len=(2, 5), audio_len=(2, 5), visual_len=(2, 5))
    m = generate_synthetic(spec)
    vocab = build_vocab([r.text for r in m["train"]])
    cfg = ModelConfig(encoder=EncoderConfig(model_dim=8, num_layers=2, num_heads=2, dropout_p=0.0, max_seq_len=16),
                      fusion_mode=fusion_mode, audio_dim=5, visual_dim=4, head_dropout=0.0)
    model = SentimentModel(cfg, vocab, seed=seed)
    batch = collate(m["train"][:3], vocab, cfg.encoder.max_seq_len)
    return model, batch


def check_model(model: SentimentModel, batch, coords_per_param: int = 6, h: float = STEP,
                seed: int = 0) -> Dict[str, Tuple[float, str, int]]:
    """Max relative error per parameter group between backward() and central differences."""
    model.zero_grad()
    T.backward(model.loss(batch))
    analytic = {k: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for k, p in model.params.items()}
    model.zero_grad()
    rng = Rng(seed)
    out: Dict[str, Tuple[float, str, int]] = {}
    for name, p in model.params.items():
        flat_grad = analytic[name].reshape(-1)
        n = flat_grad.size
        half = max(1, coords_per_param // 2)
        largest = np.argsort(-np.abs(flat_grad), kind="stable")[:half]
        sampled = rng.permutation(n)[:half]
        coords = sorted(set(largest.tolist()) | set(sampled.tolist()))
        numeric = T.numeric_grad(lambda _: model.loss(batch), p, h, coords)
        err = float(T.relative_error(flat_grad[coords], numeric, ERROR_FLOOR).max())
        group = param_group(name)
        prev = out.get(group)
        count = len(coords) + (prev[2] if prev else 0)
        if prev is None or err > prev[0]:
            out[group] = (err, name, count)
        else:
            out[group] = (prev[0], prev[1], count)
    return out


def gradcheck(modes=("concat", "cross_attention"), coords_per_param: int = 6) -> List[GradcheckReport]:
    reports = []
    with T.precision(np.float64):
        for mode in modes:
            model, batch = tiny_setup(mode)
            groups = check_model(model, batch, coords_per_param)
            reports.append(GradcheckReport(mode, [GroupResult(g, e, w, c) for g, (e, w, c) in groups.items()]))
    return reports
