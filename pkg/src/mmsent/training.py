"""Adam, mini-batch training, early stopping and checkpoint files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import SegmentRecord, split_iter
from .errors import (CheckpointCorruptError, CheckpointVersionError, ConfigError, NumericalError,
                     PreconditionError)
from .head import class_to_value
from .metrics import MetricsReport, report
from .modality import Vocabulary
from .model import ModelConfig, SentimentModel
from .tensor import Rng, Tensor

logger = logging.getLogger(__name__)

_SHUFFLE_STREAM = 2
_DROPOUT_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_delta: float = 0.0

    def __post_init__(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must not exceed max_epochs ({self.max_epochs})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam betas must be in [0, 1) and eps positive")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta must be >= 0, got {self.min_delta}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero.

    All gradients are checked before any parameter moves, so a non-finite
    gradient leaves the model untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)


# --------------------------------------------------------------------------- #
# Epochs and evaluation
# --------------------------------------------------------------------------- #


def train_epoch(model: SentimentModel, records: Sequence[SegmentRecord], config: TrainConfig,
                state: AdamState, epoch: int = 1) -> float:
    """One pass over ``records``; returns the mean per-sample training loss."""
    if not records:
        raise PreconditionError("training split is empty")
    root = Rng(config.seed)
    shuffle = root.derive(_SHUFFLE_STREAM, epoch)
    drop = root.derive(_DROPOUT_STREAM, epoch)
    total = 0.0
    max_len = model.config.encoder.max_seq_len
    for b, batch in enumerate(split_iter(records, config.batch_size, model.vocab, shuffle, max_len), start=1):
        model.zero_grad()
        loss = model.loss(batch, training=True, rng=drop)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
        T.backward(loss)
        try:
            adam_step(model.params, state, config.learning_rate, config.beta1, config.beta2, config.eps)
        except NumericalError as exc:
            raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from None
        total += value * len(batch)
    model.zero_grad()
    return total / len(records)


@dataclass
class Predictions:
    ids: List[str]
    probs: np.ndarray        # [N, 7] float64
    values: np.ndarray       # [N] predicted sentiment in -3..3
    labels: np.ndarray       # [N] true sentiment
    loss: float              # mean per-sample cross-entropy


def predict(model: SentimentModel, records: Sequence[SegmentRecord], batch_size: int = 32) -> Predictions:
    """Dropout-free forward pass over ``records`` in file order."""
    if not records:
        raise PreconditionError("evaluation split is empty")
    ids, probs, total = [], [], 0.0
    for batch in split_iter(records, batch_size, model.vocab, None, model.config.encoder.max_seq_len):
        logits = model.forward(batch, training=False)
        total += float(T.cross_entropy(logits, batch.labels).data) * len(batch)
        probs.append(T._softmax_np(logits.data.astype(np.float64), -1))
        ids.extend(batch.ids)
    probs = np.concatenate(probs)
    values = class_to_value(np.argmax(probs, axis=1))
    labels = np.array([r.label for r in records], dtype=np.int64)
    return Predictions(ids, probs, values, labels, total / len(records))


def evaluate(model: SentimentModel, records: Sequence[SegmentRecord], batch_size: int = 32) -> Tuple[float, MetricsReport]:
    p = predict(model, records, batch_size)
    return p.loss, report(p.values, p.labels)


# --------------------------------------------------------------------------- #
# fit
# --------------------------------------------------------------------------- #


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: MetricsReport


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    epoch: int
    val_loss: float
    model_config: dict
    train_config: dict
    vocab: List[str]
    val_metrics: Optional[dict] = None
    version: int = 1


@dataclass
class FitResult:
    best: Checkpoint
    history: List[EpochLog]
    stop_epoch: int
    stopped_early: bool

    @property
    def best_epoch(self) -> int:
        return self.best.epoch


def snapshot(model: SentimentModel, epoch: int, val_loss: float, config: TrainConfig,
             val_metrics: Optional[MetricsReport] = None) -> Checkpoint:
    return Checkpoint(
        params=model.state_dict(),
        epoch=epoch,
        val_loss=val_loss,
        model_config=model.config.to_dict(),
        train_config=config.to_dict(),
        vocab=model.vocab.to_list(),
        val_metrics=None if val_metrics is None else val_metrics.to_dict(),
    )


def early_stopping_trace(val_losses: Sequence[float], patience: int, min_delta: float = 0.0) -> Tuple[int, int]:
    """(best_epoch, stop_epoch) for a sequence of validation losses, 1-based."""
    best, best_epoch, stale = math.inf, 0, 0
    for epoch, loss in enumerate(val_losses, start=1):
        if loss < best - min_delta:
            best, best_epoch, stale = loss, epoch, 0
        else:
            stale += 1
            if stale >= patience:
                return best_epoch, epoch
    return best_epoch, len(val_losses)


def fit(model: SentimentModel, train: Sequence[SegmentRecord], val: Sequence[SegmentRecord],
        config: TrainConfig, on_epoch: Optional[Callable[[EpochLog], None]] = None) -> FitResult:
    """Train until ``max_epochs`` or until validation loss fails to improve for ``patience`` epochs.

    Returns the checkpoint of the epoch with the lowest validation loss.
    """
    if not train or not val:
        raise PreconditionError("fit needs non-empty train and validation splits")
    state = AdamState()
    history: List[EpochLog] = []
    best: Optional[Checkpoint] = None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        train_loss = train_epoch(model, train, config, state, epoch)
        val_loss, metrics = evaluate(model, val, config.batch_size)
        log = EpochLog(epoch, train_loss, val_loss, metrics)
        history.append(log)
        if on_epoch is not None:
            on_epoch(log)
        if best is None or val_loss < best.val_loss - config.min_delta:
            best = snapshot(model, epoch, val_loss, config, metrics)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d (best epoch %d)", epoch, best.epoch)
                return FitResult(best, history, epoch, True)
    return FitResult(best, history, config.max_epochs, False)


def model_from_checkpoint(ckpt: Checkpoint) -> SentimentModel:
    model = SentimentModel(ModelConfig.from_dict(ckpt.model_config), Vocabulary(list(ckpt.vocab)),
                           seed=ckpt.train_config.get("seed", 42))
    model.load_state_dict(ckpt.params)
    return model


# --------------------------------------------------------------------------- #
# Checkpoint files
# --------------------------------------------------------------------------- #
#
#   magic      8 bytes  b"MMSCKPT\0"
#   version    u8
#   digest     32 bytes sha256 of the canonical config JSON
#   hlen       u32 LE
#   header     hlen bytes of UTF-8 JSON (metadata + parameter manifest)
#   payload    little-endian float32 arrays at the manifest's byte offsets
#   checksum   u64 LE, blake2b-64 of every preceding byte

MAGIC = b"MMSCKPT\x00"
CHECKPOINT_VERSION = 1
_FIXED = len(MAGIC) + 1 + 32 + 4
_TRAILER = 8


def _config_digest(model_config: dict, train_config: dict) -> bytes:
    blob = json.dumps({"model": model_config, "train": train_config}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).digest()


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "vocab": ckpt.vocab,
        "val_metrics": ckpt.val_metrics,
        "params": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<B", CHECKPOINT_VERSION),
        _config_digest(ckpt.model_config, ckpt.train_config),
        struct.pack("<I", len(hbytes)),
        hbytes,
        *chunks,
    ])
    return body + _checksum(body)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic bytes)")
    version = data[len(MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(version, CHECKPOINT_VERSION)
    if len(data) < _FIXED + _TRAILER:
        raise CheckpointCorruptError("checkpoint truncated")
    body, trailer = data[:-_TRAILER], data[-_TRAILER:]
    if _checksum(body) != trailer:
        raise CheckpointCorruptError("checksum mismatch (truncated or corrupted checkpoint)")
    digest = body[len(MAGIC) + 1: len(MAGIC) + 33]
    (hlen,) = struct.unpack("<I", body[len(MAGIC) + 33: _FIXED])
    try:
        header = json.loads(body[_FIXED: _FIXED + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from None
    if _config_digest(header["model_config"], header["train_config"]) != digest:
        raise CheckpointCorruptError("config digest does not match header")
    payload = body[_FIXED + hlen:]
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        start, stop = entry["offset"], entry["offset"] + 4 * count
        if stop > len(payload):
            raise CheckpointCorruptError(f"parameter {entry['name']} extends past payload")
        params[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").astype(np.float32).reshape(entry["shape"])
    return Checkpoint(
        params=params,
        epoch=header["epoch"],
        val_loss=header["val_loss"],
        model_config=header["model_config"],
        train_config=header["train_config"],
        vocab=header["vocab"],
        val_metrics=header.get("val_metrics"),
        version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
