"""Dataset manifests, the synthetic generator, and batch assembly.

Manifest file layout (UTF-8, one JSON object per line)::

    {"format": "mmsent-manifest", "version": 1, "dims": {"audio": 74, "visual": 35},
     "counts": {"train": n, "validation": n, "test": n}}
    {"id": "...", "split": "train", "label": -3..3, "text": "...", "audio": [[...]], "visual": [[...]]}
    ...

Floats are written with Python's shortest round-trip repr, so identical
manifests serialize to identical bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import IntegrityError, ManifestParseError, PreconditionError, SchemaError
from .modality import PAD, Vocabulary, sanitize_features, tokenize
from .tensor import Rng

FORMAT_NAME = "mmsent-manifest"
FORMAT_VERSION = 1
SPLITS = ("train", "validation", "test")
LABELS = range(-3, 4)


@dataclass(eq=False)
class SegmentRecord:
    id: str
    text: str
    audio: np.ndarray
    visual: np.ndarray
    label: int

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.visual = np.asarray(self.visual, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, SegmentRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.text == other.text
            and self.label == other.label
            and self.audio.shape == other.audio.shape
            and self.visual.shape == other.visual.shape
            and np.array_equal(self.audio, other.audio, equal_nan=True)
            and np.array_equal(self.visual, other.visual, equal_nan=True)
        )


@dataclass
class DatasetManifest:
    audio_dim: int = 74
    visual_dim: int = 35
    splits: Dict[str, List[SegmentRecord]] = field(default_factory=lambda: {s: [] for s in SPLITS})

    def __getitem__(self, split: str) -> List[SegmentRecord]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.splits[split]

    def counts(self) -> Dict[str, int]:
        return {s: len(self.splits.get(s, [])) for s in SPLITS}

    def validate(self) -> None:
        seen = set()
        for split, records in self.splits.items():
            if split not in SPLITS:
                raise SchemaError(f"unknown split {split!r}")
            for r in records:
                _check_record(r, self.audio_dim, self.visual_dim)
                if r.id in seen:
                    raise IntegrityError(f"duplicate record id {r.id!r}")
                seen.add(r.id)


def _check_record(r: SegmentRecord, audio_dim: int, visual_dim: int) -> None:
    if isinstance(r.label, bool) or not isinstance(r.label, (int, np.integer)) or r.label not in LABELS:
        raise SchemaError(f"record {r.id!r}: label {r.label!r} outside -3..3")
    for name, arr, dim in (("audio", r.audio, audio_dim), ("visual", r.visual, visual_dim)):
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise SchemaError(f"record {r.id!r}: {name} must be a non-empty frame matrix, got shape {arr.shape}")
        if arr.shape[1] != dim:
            raise SchemaError(f"record {r.id!r}: {name} dim {arr.shape[1]} != declared {dim}")


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #


def _record_json(r: SegmentRecord, split: str) -> str:
    obj = {
        "id": r.id,
        "split": split,
        "label": int(r.label),
        "text": r.text,
        "audio": r.audio.tolist(),
        "visual": r.visual.tolist(),
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def dumps_manifest(m: DatasetManifest) -> str:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": {"audio": m.audio_dim, "visual": m.visual_dim},
        "counts": m.counts(),
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for split in SPLITS:
        lines.extend(_record_json(r, split) for r in m.splits.get(split, []))
    return "\n".join(lines) + "\n"


def write_manifest(m: DatasetManifest, path) -> None:
    text = dumps_manifest(m)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write manifest to {os.fspath(path)}: {exc.strerror}") from exc


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise ManifestParseError("expected a JSON object", lineno)
    return obj


def loads_manifest(text: str) -> DatasetManifest:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestParseError("missing header", 1)
    header = _parse_line(lines[0], 1)
    if header.get("format") != FORMAT_NAME:
        raise ManifestParseError(f"not an {FORMAT_NAME} file", 1)
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(f"manifest version {header.get('version')!r} unsupported (expected {FORMAT_VERSION})")
    try:
        dims = header["dims"]
        audio_dim, visual_dim = int(dims["audio"]), int(dims["visual"])
    except (KeyError, TypeError, ValueError):
        raise ManifestParseError("header lacks dims.audio / dims.visual", 1) from None

    m = DatasetManifest(audio_dim, visual_dim)
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        obj = _parse_line(line, lineno)
        missing = {"id", "split", "label", "text", "audio", "visual"} - obj.keys()
        if missing:
            raise ManifestParseError(f"record missing fields {sorted(missing)}", lineno)
        rid = obj["id"]
        if not isinstance(rid, str) or not isinstance(obj["text"], str):
            raise ManifestParseError("id and text must be strings", lineno)
        if obj["split"] not in SPLITS:
            raise SchemaError(f"record {rid!r}: unknown split {obj['split']!r}")
        try:
            audio = np.array(obj["audio"], dtype=np.float64)
            visual = np.array(obj["visual"], dtype=np.float64)
        except (TypeError, ValueError):
            raise SchemaError(f"record {rid!r}: feature matrices must be rectangular numeric arrays") from None
        rec = SegmentRecord(rid, obj["text"], audio, visual, obj["label"])
        _check_record(rec, audio_dim, visual_dim)
        if rid in seen:
            raise IntegrityError(f"duplicate record id {rid!r} (line {lineno})")
        seen.add(rid)
        m.splits[obj["split"]].append(rec)

    counts = header.get("counts")
    if counts is not None and counts != m.counts():
        raise IntegrityError(f"header counts {counts} do not match records {m.counts()} (truncated file?)")
    return m


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_manifest(fh.read())


# --------------------------------------------------------------------------- #
# Synthetic data
# --------------------------------------------------------------------------- #

LEXICON = {
    -3: ("awful", "horrible", "terrible", "dreadful"),
    -2: ("bad", "poor", "disappointing", "weak"),
    -1: ("meh", "dull", "mediocre", "bland"),
    0: ("okay", "average", "ordinary", "neutral"),
    1: ("decent", "nice", "pleasant", "solid"),
    2: ("good", "great", "enjoyable", "strong"),
    3: ("amazing", "wonderful", "fantastic", "brilliant"),
}
FILLER = ("the", "movie", "film", "was", "this", "really", "and", "i", "it", "story",
          "acting", "so", "very", "quite", "plot", "think")


@dataclass(frozen=True)
class SynthSpec:
    n: int = 700
    seed: int = 42
    separability: float = 1.0
    fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    text_len: Tuple[int, int] = (4, 12)
    audio_len: Tuple[int, int] = (6, 20)
    visual_len: Tuple[int, int] = (6, 20)
    audio_dim: int = 74
    visual_dim: int = 35

    def __post_init__(self):
        if not 0.0 <= self.separability <= 1.0:
            raise ValueError(f"separability must be in [0, 1], got {self.separability}")
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")
        for name in ("text_len", "audio_len", "visual_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.audio_dim < 1 or self.visual_dim < 1:
            raise ValueError("feature dims must be positive")

    def split_sizes(self) -> Dict[str, int]:
        n_train = int(round(self.fractions[0] * self.n))
        n_val = int(round(self.fractions[1] * self.n))
        return {"train": n_train, "validation": n_val, "test": self.n - n_train - n_val}


def generate_synthetic(spec: SynthSpec) -> DatasetManifest:
    """Label-correlated stand-in data.

    Labels are uniform over -3..3. Each text word is drawn from the label's
    lexicon with probability ``separability`` and from a shared filler list
    otherwise. Audio/visual frames are ``separability * class_mean + N(0, 1)``
    with class means drawn once per dataset, rounded to 4 decimals.
    """
    root = Rng(spec.seed)
    audio_means = root.derive(1).normal((7, spec.audio_dim))
    visual_means = root.derive(2).normal((7, spec.visual_dim))
    rng = root.derive(3)
    s = spec.separability
    labels = rng.integers(-3, 4, spec.n)

    records = []
    for i, label in enumerate(labels):
        label = int(label)
        n_words = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1, 1)[0])
        use_class = rng.uniform(n_words) < s
        class_pick = rng.integers(0, len(LEXICON[label]), n_words)
        filler_pick = rng.integers(0, len(FILLER), n_words)
        words = [LEXICON[label][c] if u else FILLER[f] for u, c, f in zip(use_class, class_pick, filler_pick)]

        frames = []
        for (lo, hi), means in ((spec.audio_len, audio_means), (spec.visual_len, visual_means)):
            t = int(rng.integers(lo, hi + 1, 1)[0])
            x = s * means[label + 3] + rng.normal((t, means.shape[1]))
            frames.append(np.round(x, 4))
        records.append(SegmentRecord(f"syn{spec.seed}-{i:05d}", " ".join(words), frames[0], frames[1], label))

    m = DatasetManifest(spec.audio_dim, spec.visual_dim)
    start = 0
    for split, size in spec.split_sizes().items():
        m.splits[split] = records[start:start + size]
        start += size
    return m


# --------------------------------------------------------------------------- #
# Batching
# --------------------------------------------------------------------------- #


@dataclass
class Batch:
    ids: List[str]
    text_ids: np.ndarray      # [B, Lt] int
    text_mask: np.ndarray     # [B, Lt] bool
    audio: np.ndarray         # [B, Ta, Da]
    audio_mask: np.ndarray    # [B, Ta]
    visual: np.ndarray        # [B, Tv, Dv]
    visual_mask: np.ndarray   # [B, Tv]
    labels: np.ndarray        # [B] class indices 0..6

    def __len__(self) -> int:
        return len(self.ids)


def _pad_frames(mats: Sequence[np.ndarray], max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    mats = [sanitize_features(m[:max_len]) for m in mats]
    length = max(m.shape[0] for m in mats)
    out = np.zeros((len(mats), length, mats[0].shape[1]))
    mask = np.zeros((len(mats), length), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = True
    return out, mask


def collate(records: Sequence[SegmentRecord], vocab: Vocabulary, max_len: int = 64) -> Batch:
    """Tokenize, sanitize and pad a list of records to the batch-max lengths.

    Sequences longer than ``max_len`` are truncated.
    """
    if not records:
        raise PreconditionError("cannot collate an empty batch")
    toks = [tokenize(r.text, vocab, max_len) for r in records]
    lt = max(len(t.ids) for t in toks)
    text_ids = np.full((len(records), lt), PAD, dtype=np.int64)
    text_mask = np.zeros((len(records), lt), dtype=bool)
    for i, t in enumerate(toks):
        text_ids[i, : len(t.ids)] = t.ids
        text_mask[i, : len(t.ids)] = True
    audio, audio_mask = _pad_frames([r.audio for r in records], max_len)
    visual, visual_mask = _pad_frames([r.visual for r in records], max_len)
    labels = np.array([r.label + 3 for r in records], dtype=np.int64)
    return Batch([r.id for r in records], text_ids, text_mask, audio, audio_mask, visual, visual_mask, labels)


def batch_indices(n: int, batch_size: int, rng: Optional[Rng] = None) -> List[np.ndarray]:
    if n <= 0:
        raise PreconditionError("cannot iterate over an empty split")
    if batch_size <= 0:
        raise PreconditionError(f"batch_size must be positive, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def split_iter(records: Sequence[SegmentRecord], batch_size: int, vocab: Vocabulary,
               rng: Optional[Rng] = None, max_len: int = 64) -> Iterator[Batch]:
    """Batches in permuted order when ``rng`` is given, in file order otherwise; last batch may be short."""
    for idx in batch_indices(len(records), batch_size, rng):
        yield collate([records[i] for i in idx], vocab, max_len)
