"""Classification head: dense -> ReLU -> LayerNorm -> dropout -> dense(7)."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Rng, Tensor
from .transformer import xavier_uniform

NUM_CLASSES = 7


def class_to_value(index):
    """Class index 0..6 -> sentiment value -3..+3."""
    return np.asarray(index) - 3 if not isinstance(index, (int, np.integer)) else int(index) - 3


def value_to_class(value):
    return np.asarray(value) + 3 if not isinstance(value, (int, np.integer)) else int(value) + 3


def init_head(rng: Rng, in_dim: int, hidden_dim: int) -> Dict[str, Tensor]:
    return {
        "dense1.w": Tensor(xavier_uniform(rng, in_dim, hidden_dim), requires_grad=True),
        "dense1.b": Tensor(np.zeros(hidden_dim), requires_grad=True),
        "ln.g": Tensor(np.ones(hidden_dim), requires_grad=True),
        "ln.b": Tensor(np.zeros(hidden_dim), requires_grad=True),
        "dense2.w": Tensor(xavier_uniform(rng, hidden_dim, NUM_CLASSES), requires_grad=True),
        "dense2.b": Tensor(np.zeros(NUM_CLASSES), requires_grad=True),
    }


def head_forward(fused: Tensor, params: Dict[str, Tensor], dropout_p: float = 0.3, training: bool = False,
                 rng: Optional[Rng] = None) -> Tensor:
    """Raw logits [..., 7]; the caller applies softmax / log-softmax as needed."""
    w1 = params["dense1.w"]
    if fused.shape[-1] != w1.shape[0]:
        raise ShapeError(f"fused dim {fused.shape[-1]} does not match head input dim {w1.shape[0]}")
    if fused.ndim == 1:
        return head_forward(fused.reshape(1, -1), params, dropout_p, training, rng).reshape(NUM_CLASSES)
    h = T.relu(fused @ w1 + params["dense1.b"])
    h = T.layer_norm(h, params["ln.g"], params["ln.b"])
    h = T.dropout(h, dropout_p, training, rng)
    return h @ params["dense2.w"] + params["dense2.b"]


def predict_class(logits) -> np.ndarray:
    """Argmax over the last axis mapped to -3..+3; ties go to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.shape[-1] != NUM_CLASSES:
        raise ShapeError(f"expected {NUM_CLASSES} logits, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise DataError("NaN logit")
    idx = np.argmax(arr, axis=-1)
    return class_to_value(idx) if arr.ndim > 1 else int(idx) - 3
