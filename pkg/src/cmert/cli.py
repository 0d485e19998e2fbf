"""Command-line entry point: ``cmert gen|train|infer|eval|diagnose``.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
Every command writes its outputs plus one ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .container import ContainerError
from .diagnostics import leakage_audit, per_position_diagnostic
from .memory import FeatureStream, PartitionConfig, load_stream, sample_anchors_sliding, save_stream
from .metrics import MetricError, evaluate, per_frame_map
from .model import ModelConfig, ModelParams, load_checkpoint
from .presets import PRESETS, get_preset
from .streaming import PredictionFormatError, read_predictions, run_stream, write_predictions
from .synthetic import SyntheticGrammar, generate_stream
from .tensor import ContractError, DimensionError
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("cmert")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
FORMATS = {"stream": 1, "checkpoint": 1, "predictions": 1, "train_log": 1, "manifest": 1}

DEFAULT_PARTITION = dict(long_frames=64, short_frames=8, antic_frames=2, past_frames=2,
                         future_frames=8)
DEFAULT_MODEL = dict(d_model=32, heads=4, q_long0=8, q_long1=8)


class UsageError(Exception):
    """Bad arguments or unusable input files (exit code 2)."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    formats: dict = field(default_factory=lambda: dict(FORMATS))
    started_at: str = ""
    finished_at: str = ""

    @property
    def config_hash(self) -> str:
        blob = json.dumps({"command": self.command, "config": self.config, "seed": self.seed},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, out_dir: Path) -> Path:
        d = asdict(self)
        d["config_hash"] = self.config_hash
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(d, indent=2, sort_keys=True, default=str) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return cfg


def _build(cls, fields: dict, what: str):
    unknown = set(fields) - set(cls.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown {what} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**fields)
    except (ContractError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from None


def _load_stream_file(path: str | Path) -> FeatureStream:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"stream file {p} not found")
    return load_stream(p)


def _stream_files(data: str) -> list[Path]:
    p = Path(data)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise UsageError(f"data path {p} not found")
    files = sorted(p.glob("*.cmrt"))
    if not files:
        raise UsageError(f"no stream files (*.cmrt) in {p}")
    return files


def _load_ckpt(path: str) -> ModelParams:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> RunManifest:
    if args.length < 1:
        raise UsageError(f"--length must be >= 1, got {args.length}")
    if args.streams < 1:
        raise UsageError(f"--streams must be >= 1, got {args.streams}")
    try:
        grammar = SyntheticGrammar.from_dict(_read_json(args.grammar))
    except (ContractError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid grammar: {exc}") from None
    out = _out_dir(args.out)
    man = RunManifest("gen", {"grammar": grammar.to_dict(), "length": args.length,
                              "streams": args.streams}, args.seed,
                      {"grammar": args.grammar or "<defaults>"})
    rng = np.random.default_rng(args.seed)
    for k in range(args.streams):
        path = out / f"stream_{k:03d}.cmrt"
        save_stream(path, generate_stream(grammar, args.length, rng))
        man.outputs[path.stem] = str(path)
    return man


def _resolve_train_config(args, streams: list[FeatureStream]):
    cfg = _read_json(args.config)
    unknown = set(cfg) - {"partition", "model", "train"}
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    first = streams[0]
    for s in streams[1:]:
        if (s.feature_dim, s.num_classes) != (first.feature_dim, first.num_classes):
            raise UsageError("training streams disagree on feature dimension or class count")
    data_fields = dict(feature_dim=first.feature_dim, num_classes=first.num_classes, fps=first.fps)

    part_fields = dict(cfg.get("partition", {}))
    for k, v in data_fields.items():
        if k in part_fields and part_fields[k] != v:
            raise UsageError(f"config partition.{k}={part_fields[k]} but data has {k}={v}")
    if args.preset:
        preset = get_preset(args.preset)
        base_part = asdict(preset.partition(feature_dim=first.feature_dim,
                                            num_classes=first.num_classes))
        base_model = dict(DEFAULT_MODEL, q_long0=preset.q_long0, q_long1=preset.q_long1)
    else:
        base_part = dict(DEFAULT_PARTITION, **data_fields)
        base_model = dict(DEFAULT_MODEL)
    partition = _build(PartitionConfig, {**base_part, **part_fields}, "partition")
    model = _build(ModelConfig, {**base_model, **cfg.get("model", {})}, "model")

    train_fields = dict(cfg.get("train", {}))
    if args.steps is not None:
        train_fields["steps"] = args.steps
    if args.seed is not None:
        train_fields["seed"] = args.seed
    if args.preset:
        rng = np.random.default_rng(0)
        anchors = sum(len(sample_anchors_sliding(len(s), partition, rng, start=0)) for s in streams)
        per_epoch = max(1, math.ceil(anchors / preset.batch_size))
        tcfg = preset.train(per_epoch)
        try:
            tcfg = TrainConfig(**{**asdict(tcfg), **train_fields})
        except TypeError as exc:
            raise UsageError(f"invalid train config: {exc}") from None
    else:
        tcfg = _build(TrainConfig, train_fields, "train")
    return partition, model, tcfg


def cmd_train(args) -> RunManifest:
    files = _stream_files(args.data)
    streams = [_load_stream_file(f) for f in files]
    partition, model, tcfg = _resolve_train_config(args, streams)
    out = _out_dir(args.out)
    ckpt, log_path = out / "checkpoint.cmrt", out / "train_log.jsonl"
    man = RunManifest("train", {"partition": partition.to_dict(), "model": asdict(model),
                                "train": asdict(tcfg), "preset": args.preset},
                      tcfg.seed, {"data": [str(f) for f in files], "config": args.config})
    man.outputs = {"checkpoint": str(ckpt), "log": str(log_path)}
    params = ModelParams(partition, model, seed=tcfg.seed)
    log.info("training %d parameters on %d streams for %d steps",
             params.n_parameters(), len(streams), tcfg.steps)
    try:
        train(params, streams, tcfg, log_path=log_path, checkpoint_path=ckpt)
    except (TrainingDiverged, FloatingPointError):
        man.finished_at = _now()
        man.write(out)
        raise
    return man


def cmd_infer(args) -> RunManifest:
    params = _load_ckpt(args.ckpt)
    stream = _load_stream_file(args.stream)
    cfg = params.partition
    if stream.feature_dim != cfg.feature_dim:
        raise UsageError(f"stream feature dim D={stream.feature_dim} does not match "
                         f"checkpoint D={cfg.feature_dim}")
    if stream.num_classes != cfg.num_classes:
        raise UsageError(f"stream class count C={stream.num_classes} does not match "
                         f"checkpoint C={cfg.num_classes}")
    if args.delta is not None:
        if not 0 <= args.delta < cfg.short_frames:
            raise UsageError(f"--delta must lie in [0, {cfg.short_frames}), got {args.delta}")
        params.repartition(delta=args.delta)
    out = _out_dir(args.out)
    pred = out / "predictions.jsonl"
    man = RunManifest("infer", {"delta": params.partition.delta, "cache": args.cache}, None,
                      {"checkpoint": args.ckpt, "stream": args.stream}, {"predictions": str(pred)})
    write_predictions(pred, run_stream(params, stream, cache=args.cache))
    return man


def _antic_map(ant: dict[int, dict[int, np.ndarray]], labels: np.ndarray) -> dict[str, float]:
    res = {}
    for tau, by_frame in sorted(ant.items()):
        frames = np.array([t for t in sorted(by_frame) if t + tau < len(labels)], dtype=np.int64)
        if frames.size == 0:
            continue
        probs = np.stack([by_frame[t] for t in frames])
        try:
            res[str(tau)] = per_frame_map(probs, labels[frames + tau])
        except MetricError:
            continue
    return res


def cmd_eval(args) -> RunManifest:
    if not Path(args.pred).is_file():
        raise UsageError(f"prediction file {args.pred} not found")
    frames, det, ant = read_predictions(args.pred)
    stream = _load_stream_file(args.gt)
    if frames.size == 0:
        raise UsageError(f"{args.pred}: no predictions")
    if frames.min() < 0 or frames.max() >= len(stream):
        raise UsageError(f"{args.pred}: frame indices outside the stream of length {len(stream)}")
    if det.shape[1] != stream.num_classes + 1:
        raise UsageError(f"{args.pred}: {det.shape[1]} classes but stream has C+1="
                         f"{stream.num_classes + 1}")
    order = np.argsort(frames, kind="stable")
    report = evaluate(det[order], stream.labels[frames[order]], stream.fps,
                      args.pf1_threshold, args.iou)
    out = _out_dir(args.out)
    path = out / "report.json"
    body = report.to_dict()
    body["anticipation_map"] = _antic_map(ant, stream.labels)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return RunManifest("eval", {"pf1_threshold_s": args.pf1_threshold, "iou": args.iou}, None,
                       {"pred": args.pred, "gt": args.gt}, {"report": str(path)})


def cmd_diagnose(args) -> RunManifest:
    params = _load_ckpt(args.ckpt)
    out = _out_dir(args.out)
    man = RunManifest("diagnose", {"mode": args.mode, "max_windows": args.max_windows},
                      args.seed, {"checkpoint": args.ckpt, "data": args.data})
    if args.mode == "per-position":
        if args.data is None:
            raise UsageError("--mode per-position needs --data")
        streams = [_load_stream_file(f) for f in _stream_files(args.data)]
        prof = per_position_diagnostic(params, streams, seed=args.seed, max_windows=args.max_windows)
        path = out / "per_position.csv"
        prof.write_csv(path)
    else:
        rep = leakage_audit(params, seed=args.seed)
        path = out / "leakage.csv"
        rep.write_csv(path)
        summary = out / "leakage.json"
        summary.write_text(json.dumps({"delta": rep.delta, "max_future": rep.max_future,
                                       "max_after_i": rep.max_beyond(0)}, indent=2) + "\n")
        man.outputs["summary"] = str(summary)
        log.info("max sensitivity beyond latency: %.3e", rep.max_future)
    man.outputs["csv"] = str(path)
    return man


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmert", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"cmert {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = add("gen", "generate synthetic feature streams")
    p.add_argument("--grammar", help="JSON file with SyntheticGrammar fields")
    p.add_argument("--length", type=int, required=True, help="frames per stream")
    p.add_argument("--streams", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = add("train", "train a model on a directory of streams")
    p.add_argument("--config", help="JSON with optional partition/model/train sections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = add("infer", "stream a checkpoint over one stream file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--delta", type=int, help="latency in frames (default: checkpoint's)")
    p.add_argument("--cache", action="store_true", help="reuse long-term compression")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = add("eval", "score a prediction dump against a stream's labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pf1-threshold", type=float, default=1.0, help="seconds")
    p.add_argument("--iou", type=float, default=0.25)
    p.set_defaults(func=cmd_eval)

    p = add("diagnose", "per-position loss curve or leakage audit")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", choices=["per-position", "leakage"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-windows", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        man = args.func(args)
    except (UsageError, ContainerError, PredictionFormatError, MetricError, DimensionError,
            ContractError, KeyError) as exc:
        print(f"cmert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"cmert {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("unexpected failure")
        print(f"cmert {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    man.started_at, man.finished_at = started, _now()
    man.write(Path(args.out))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
