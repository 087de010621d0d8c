"""Transformer-based multimodal sentiment analysis with early fusion, on a from-scratch autodiff engine."""

from .data import DatasetManifest, SegmentRecord, SynthSpec, generate_synthetic, load_manifest, write_manifest
from .metrics import MetricsReport, report
from .model import ModelConfig, SentimentModel
from .tensor import Rng, Tensor, backward, precision
from .training import TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint
from .transformer import EncoderConfig

__all__ = [
    "DatasetManifest", "EncoderConfig", "MetricsReport", "ModelConfig", "Rng", "SegmentRecord", "SentimentModel",
    "SynthSpec", "Tensor", "TrainConfig", "backward", "evaluate", "fit", "generate_synthetic", "load_checkpoint",
    "load_manifest", "precision", "report", "save_checkpoint", "write_manifest",
]
__version__ = "0.1.0"
