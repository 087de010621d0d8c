"""Command-line entry point: ``mmsent gen-synth | train | eval | predict | gradcheck``.

Exit codes: 0 success, 2 config/flag error, 3 I/O or file-format error,
4 numerical abort, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .data import DatasetManifest, SPLITS, SynthSpec, generate_synthetic, load_manifest, write_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .modality import build_vocab
from .model import ModelConfig, SentimentModel
from .training import (Checkpoint, TrainConfig, evaluate, fit, load_checkpoint, model_from_checkpoint, predict,
                       save_checkpoint)
from .transformer import EncoderConfig
from .verify import TOLERANCE, gradcheck

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_mae", "val_acc7", "val_f1_7", "val_acc2", "val_f1_binary")

logger = logging.getLogger("mmsent")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- #
# Run configuration
# --------------------------------------------------------------------------- #

_MODEL_KEYS = {"model_dim", "num_layers", "num_heads", "ff_dim", "dropout", "max_seq_len", "positional",
               "fusion", "hidden_dim", "head_dropout"}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: Optional[str] = None
    audio_dim: Optional[int] = None
    visual_dim: Optional[int] = None
    min_count: int = 1
    run_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "data", "output"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        model = dict(d.get("model") or {})
        bad = set(model) - _MODEL_KEYS
        if bad:
            raise ConfigError(f"unknown model keys {sorted(bad)}")
        data = dict(d.get("data") or {})
        bad = set(data) - {"manifest", "audio_dim", "visual_dim", "min_count"}
        if bad:
            raise ConfigError(f"unknown data keys {sorted(bad)}")
        output = dict(d.get("output") or {})
        cfg = cls(
            model=model,
            train=TrainConfig.from_dict(d.get("train") or {}),
            manifest=data.get("manifest"),
            audio_dim=data.get("audio_dim"),
            visual_dim=data.get("visual_dim"),
            min_count=int(data.get("min_count", 1)),
            run_dir=output.get("run_dir", "runs/default"),
        )
        cfg.model_config(cfg.audio_dim or 74, cfg.visual_dim or 35)
        return cfg

    def model_config(self, audio_dim: int, visual_dim: int, full: bool = False) -> ModelConfig:
        m = self.model
        fusion = m.get("fusion") or {}
        if not isinstance(fusion, dict) or set(fusion) - {"mode", "layers"}:
            raise ConfigError("model.fusion must be an object with keys 'mode' and/or 'layers'")
        arch = dict(model_dim=128, num_layers=8, num_heads=16) if full else dict(
            model_dim=m.get("model_dim", 64), num_layers=m.get("num_layers", 2), num_heads=m.get("num_heads", 4))
        enc = EncoderConfig(ff_dim=m.get("ff_dim"), dropout_p=m.get("dropout", 0.3),
                            max_seq_len=m.get("max_seq_len", 64), positional=m.get("positional", True), **arch)
        return ModelConfig(encoder=enc, fusion_mode=fusion.get("mode", "concat"), fusion_layers=fusion.get("layers", 1),
                           hidden_dim=m.get("hidden_dim"), head_dropout=m.get("head_dropout", 0.3),
                           audio_dim=audio_dim, visual_dim=visual_dim)

    def snapshot(self, model_config: ModelConfig) -> dict:
        return {
            "model": model_config.to_dict(),
            "train": self.train.to_dict(),
            "data": {"manifest": self.manifest, "audio_dim": model_config.audio_dim,
                     "visual_dim": model_config.visual_dim, "min_count": self.min_count},
            "output": {"run_dir": self.run_dir},
        }


def read_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object", EXIT_CONFIG)
    return RunConfig.from_dict(raw)


def _load_data(path: Optional[str]) -> DatasetManifest:
    if not path:
        raise CliError("no dataset given (use --data or data.manifest in the config)", EXIT_CONFIG)
    try:
        return load_manifest(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc.strerror}", EXIT_IO) from None
    except DataError as exc:
        raise CliError(f"invalid dataset {path}: {exc}", EXIT_IO) from None


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}", EXIT_IO) from None
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


def _fmt(x: float) -> str:
    return repr(float(x))


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for log in history:
        m = log.val_metrics
        w.writerow([log.epoch, _fmt(log.train_loss), _fmt(log.val_loss), _fmt(m.mae), _fmt(m.acc7),
                    _fmt(m.f1_7), _fmt(m.acc2), _fmt(m.f1_binary)])
    return buf.getvalue()


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_gen_synth(args) -> int:
    try:
        spec = SynthSpec(n=args.n, seed=args.seed, separability=args.sep, audio_dim=args.audio_dim,
                         visual_dim=args.visual_dim)
    except ValueError as exc:
        raise CliError(f"--sep/--n/dims invalid: {exc}", EXIT_CONFIG) from None
    manifest = generate_synthetic(spec)
    try:
        write_manifest(manifest, args.out)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    counts = manifest.counts()
    print(" ".join(f"{s}={counts[s]}" for s in SPLITS))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    overrides = {}
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
        # patience must not exceed max_epochs
        overrides["patience"] = min(cfg.train.patience, max(args.max_epochs, 1))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **overrides})
    cfg.manifest = args.data or cfg.manifest
    cfg.run_dir = args.out or cfg.run_dir
    manifest = _load_data(cfg.manifest)
    for name, declared, actual in (("audio", cfg.audio_dim, manifest.audio_dim),
                                   ("visual", cfg.visual_dim, manifest.visual_dim)):
        if declared is not None and declared != actual:
            raise CliError(f"data.{name}_dim: expected {declared}, dataset has {actual}", EXIT_CONFIG)
    model_cfg = cfg.model_config(manifest.audio_dim, manifest.visual_dim, full=args.paper_config)
    if not manifest["train"] or not manifest["validation"]:
        raise CliError("dataset needs non-empty train and validation splits", EXIT_CONFIG)

    run_dir = Path(cfg.run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot.json").write_text(json.dumps(cfg.snapshot(model_cfg), indent=2) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write run directory {run_dir}: {exc.strerror}", EXIT_IO) from None

    vocab = build_vocab([r.text for r in manifest["train"]], cfg.min_count)
    model = SentimentModel(model_cfg, vocab, seed=cfg.train.seed)
    start = time.perf_counter()

    def progress(log):
        logger.info("epoch %d train_loss %.4f val_loss %.4f val_acc7 %.4f",
                    log.epoch, log.train_loss, log.val_loss, log.val_metrics.acc7)

    try:
        result = fit(model, manifest["train"], manifest["validation"], cfg.train, on_epoch=progress)
    except NumericalError as exc:
        raise CliError(f"numerical abort: {exc}", EXIT_NUMERIC) from None
    wall = time.perf_counter() - start

    summary = {
        "best_epoch": result.best.epoch,
        "best_val_loss": result.best.val_loss,
        "stop_epoch": result.stop_epoch,
        "epochs_completed": len(result.history),
        "stopped_early": result.stopped_early,
        "val_metrics": result.best.val_metrics,
        "wall_time_s": round(wall, 3),
        "n_parameters": model.num_parameters(),
    }
    if manifest["test"]:
        best = model_from_checkpoint(result.best)
        test_loss, test_report = evaluate(best, manifest["test"], cfg.train.batch_size)
        summary["test_loss"] = test_loss
        summary["test_metrics"] = test_report.to_dict()
    try:
        save_checkpoint(result.best, run_dir / "best.ckpt")
        (run_dir / "history.csv").write_text(history_csv(result.history))
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write run outputs to {run_dir}: {exc.strerror}", EXIT_IO) from None
    print(json.dumps({k: summary[k] for k in ("best_epoch", "best_val_loss", "stop_epoch")}))
    return EXIT_OK


def _checkpoint_and_split(args):
    ckpt = _load_ckpt(args.checkpoint)
    manifest = _load_data(args.data)
    mc = ckpt.model_config
    if (mc["audio_dim"], mc["visual_dim"]) != (manifest.audio_dim, manifest.visual_dim):
        raise CliError(
            f"feature dims mismatch: checkpoint expects audio={mc['audio_dim']} visual={mc['visual_dim']}, "
            f"dataset has audio={manifest.audio_dim} visual={manifest.visual_dim}", EXIT_CONFIG)
    records = manifest[args.split]
    if not records:
        raise CliError(f"split {args.split!r} is empty", EXIT_CONFIG)
    return ckpt, records


def cmd_eval(args) -> int:
    ckpt, records = _checkpoint_and_split(args)
    model = model_from_checkpoint(ckpt)
    _, rep = evaluate(model, records, ckpt.train_config.get("batch_size", 32))
    print(rep.to_json())
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, records = _checkpoint_and_split(args)
    model = model_from_checkpoint(ckpt)
    preds = predict(model, records, ckpt.train_config.get("batch_size", 32))
    lines = [json.dumps({"id": rid, "pred": int(v), "probs": [float(p) for p in probs]}, ensure_ascii=False)
             for rid, v, probs in zip(preds.ids, preds.values, preds.probs)]
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_IO) from None
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradcheck(coords_per_param=args.coords)
    for rep in reports:
        for g in rep.groups:
            status = "ok" if g.max_rel_error < TOLERANCE else "FAIL"
            print(f"{rep.mode:16s} {g.group:12s} max_rel_err={g.max_rel_error:.3e} "
                  f"coords={g.coords_checked:4d} worst={g.worst_param} {status}")
    failed = [r for r in reports if not r.passed()]
    if failed:
        worst = max((r.worst for r in failed), key=lambda g: g.max_rel_error)
        print(f"gradcheck FAILED: worst parameter {worst.worst_param} "
              f"(relative error {worst.max_rel_error:.3e} >= {TOLERANCE:g})", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck passed: all groups < {TOLERANCE:g}")
    return EXIT_OK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsent", description="Multimodal sentiment analysis with early fusion")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset manifest")
    p.add_argument("--n", type=int, default=700)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sep", type=float, default=1.0, help="separability in [0, 1]")
    p.add_argument("--audio-dim", type=int, default=74)
    p.add_argument("--visual-dim", type=int, default=35)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--config", help="JSON run config (model/train/data/output sections)")
    p.add_argument("--data", help="dataset manifest (overrides data.manifest)")
    p.add_argument("--out", help="run directory (overrides output.run_dir)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-config", action="store_true", help="8 layers, 16 heads, model_dim 128")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "print metrics JSON for one split"),
                                 ("predict", cmd_predict, "per-record predictions as JSON lines")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=SPLITS, default="test")
        if name == "predict":
            p.add_argument("--out", help="write to a file instead of standard output")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny float64 model")
    p.add_argument("--coords", type=int, default=6, help="coordinates sampled per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
