"""Command-line entry point tying the pieces together.

Subcommands: gen-data, train-backbone, cache-features, train-transformer,
eval, cost, ribbon, heatmap. Configuration comes from an optional JSON file
(sections: model, train, grammar, plus top-level seed/num_videos/
train_fraction) with flag overrides winning; unknown keys are rejected
before any side effect. STARNET_SEED in the environment overrides the
config-file seed. Training and eval outputs land in a fresh run directory
named by the resolved config hash and a timestamp, together with a
resolved_config.json snapshot.

Exit codes: 0 success, 2 invalid configuration, 3 I/O failure,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import metrics as metrics_mod
from . import pipeline, synthdata
from .losses import RangeBounds
from .model import ModelConfig, config_hash, action_features
from .msta import MstaConfig
from .pipeline import TrainConfig, TrainingDiverged
from .recordio import ConfigMismatchError
from .synthdata import (ChecksumError, FormatError, PhaseGrammar, PhaseMotion,
                        default_grammar)
from .tensor import NumericsError, Tensor

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Configuration rejected before any side effect."""


_TOP_KEYS = {"model", "train", "grammar", "seed", "num_videos", "train_fraction"}


def _build_config(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "msta":
            value = _build_config(MstaConfig, value, f"{path}.msta")
        elif f.name == "bounds":
            value = _build_config(RangeBounds, value, f"{path}.bounds")
        elif f.name == "motions":
            value = tuple(_build_config(PhaseMotion, m, f"{path}.motions[{i}]")
                          for i, m in enumerate(value))
        elif f.name == "durations":
            value = tuple(tuple(int(x) for x in pair) for pair in value)
        elif f.name in ("stage_channels", "stage_strides"):
            value = tuple(int(x) for x in value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{path}' config: {exc}") from exc


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    grammar: PhaseGrammar
    seed: int = 0
    num_videos: int = 100
    train_fraction: float = 0.7


def load_run_config(config_path, args) -> RunConfig:
    raw = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key '{key}'")

    seed = raw.get("seed", 0)
    if "STARNET_SEED" in os.environ:
        try:
            seed = int(os.environ["STARNET_SEED"])
        except ValueError as exc:
            raise ConfigError(f"STARNET_SEED must be an integer: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        seed = args.seed

    model_raw = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    model_raw.setdefault("seed", seed)
    train_raw.setdefault("seed", seed)
    if "STARNET_SEED" in os.environ or getattr(args, "seed", None) is not None:
        model_raw["seed"] = seed
        train_raw["seed"] = seed

    if getattr(args, "no_msta", False):
        model_raw["use_msta"] = False
    if getattr(args, "no_dsr", False):
        train_raw["lam"] = 0.0
    for flag, key in (("epochs", "epochs"), ("batches", "batches_per_epoch"),
                      ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            train_raw[key] = value

    model = _build_config(ModelConfig, model_raw, "model")
    train = _build_config(TrainConfig, train_raw, "train")
    grammar = _build_config(PhaseGrammar, raw.get("grammar", {}), "grammar")
    if getattr(args, "overlap", None) is not None:
        grammar = dataclasses.replace(grammar, overlap=args.overlap)
    return RunConfig(model=model, train=train, grammar=grammar, seed=int(seed),
                     num_videos=int(getattr(args, "videos", None)
                                    or raw.get("num_videos", 100)),
                     train_fraction=float(raw.get("train_fraction", 0.7)))


def _make_run_dir(root, model_cfg: ModelConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(root) / f"{config_hash(model_cfg)[:8]}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def _snapshot(run_dir: Path, rc: RunConfig) -> None:
    payload = {"model": asdict(rc.model), "train": asdict(rc.train),
               "grammar": asdict(rc.grammar), "seed": rc.seed,
               "num_videos": rc.num_videos, "train_fraction": rc.train_fraction,
               "model_config_hash": config_hash(rc.model)}
    (run_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    rc = load_run_config(args.config, args)
    manifest = synthdata.generate_dataset(rc.grammar, rc.num_videos, rc.seed,
                                          args.out, rc.train_fraction)
    print(f"wrote {manifest['num_videos']} videos to {args.out}")
    return 0


def cmd_train_backbone(args) -> int:
    rc = load_run_config(args.config, args)
    dataset = synthdata.load_dataset(args.data)
    run_dir = _make_run_dir(args.run_dir, rc.model)
    _snapshot(run_dir, rc)
    params, history = pipeline.train_backbone(dataset.train_videos, rc.model,
                                              rc.train)
    ckpt = run_dir / "backbone.ckpt"
    pipeline.save_checkpoint(params, ckpt)
    (run_dir / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    print(f"backbone checkpoint: {ckpt}")
    return 0


def cmd_cache_features(args) -> int:
    rc = load_run_config(args.config, args)
    dataset = synthdata.load_dataset(args.data)
    params = pipeline.load_checkpoint(args.ckpt, rc.model)
    pipeline.cache_features(dataset.train_videos, params, rc.model, args.out)
    print(f"feature cache: {args.out}")
    return 0


def cmd_train_transformer(args) -> int:
    rc = load_run_config(args.config, args)
    dataset = synthdata.load_dataset(args.data)
    backbone = pipeline.load_checkpoint(args.backbone_ckpt, rc.model)
    cache = pipeline.cache_features(dataset.train_videos, backbone, rc.model,
                                    args.cache)
    run_dir = _make_run_dir(args.run_dir, rc.model)
    _snapshot(run_dir, rc)
    params, history = pipeline.train_transformer(cache, dataset.train_videos,
                                                 backbone, rc.model, rc.train)
    ckpt = run_dir / "transformer.ckpt"
    pipeline.save_checkpoint(params, ckpt)
    (run_dir / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    print(f"transformer checkpoint: {ckpt}")
    return 0


def _write_predictions_csv(path, pred, gt) -> None:
    lines = ["frame_index,pred,gt"]
    lines += [f"{i},{int(p)},{int(g)}" for i, (p, g) in enumerate(zip(pred, gt))]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    rc = load_run_config(args.config, args)
    dataset = synthdata.load_dataset(args.data)
    backbone = pipeline.load_checkpoint(args.backbone_ckpt, rc.model)
    params = backbone
    if args.transformer_ckpt:
        params = backbone.merge(pipeline.load_checkpoint(args.transformer_ckpt,
                                                         rc.model))
    elif args.head == "task":
        raise ConfigError("eval: task head requires --transformer-ckpt")
    run_dir = _make_run_dir(args.out, rc.model)
    _snapshot(run_dir, rc)

    videos = dataset.test_videos if args.split == "test" else dataset.train_videos
    results = pipeline.predict_videos(videos, params, rc.model, head=args.head)
    summary = metrics_mod.summarize_videos(results, rc.model.num_classes,
                                           pooled=args.pooled)
    summary["variant"] = args.variant_label or (
        "no-dsr" if args.no_dsr else "full") + ("" if rc.model.use_msta else "-no-msta")
    summary["head"] = args.head
    (run_dir / "metrics.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")

    for vid, pred, gt in results:
        _write_predictions_csv(run_dir / f"{vid}_predictions.csv", pred, gt)
        metrics_mod.ribbon_export(pred, gt, run_dir / f"{vid}_ribbon.ppm")
    if rc.model.use_msta and videos and args.heatmap_frames:
        video = videos[0]
        clip = video.frames[:args.heatmap_frames]
        a_ms = action_features(Tensor(clip), params, rc.model)
        metrics_mod.action_heatmap_export(a_ms, run_dir / "heatmaps",
                                          prefix=video.video_id)
    print(f"eval outputs: {run_dir}")
    print(f"accuracy: {summary['accuracy']['mean']:.2f}%")
    return 0


def cmd_cost(args) -> int:
    rc = load_run_config(args.config, args)
    report = metrics_mod.cost_report(rc.model)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ribbon(args) -> int:
    rows = Path(args.predictions).read_text().strip().splitlines()
    if not rows or rows[0] != "frame_index,pred,gt":
        raise FormatError(f"{args.predictions}: expected frame_index,pred,gt header")
    pred, gt = [], []
    for line in rows[1:]:
        _, p, g = line.split(",")
        pred.append(int(p))
        gt.append(int(g))
    ppm, csv = metrics_mod.ribbon_export(pred, gt, args.out)
    print(f"ribbon: {ppm} segments: {csv}")
    return 0


def cmd_heatmap(args) -> int:
    rc = load_run_config(args.config, args)
    dataset = synthdata.load_dataset(args.data)
    params = pipeline.load_checkpoint(args.ckpt, rc.model)
    if args.video not in dataset.videos:
        raise ConfigError(f"heatmap: unknown video id {args.video!r}")
    video = dataset.videos[args.video]
    clip = video.frames[:args.frames] if args.frames else video.frames
    a_ms = action_features(Tensor(clip), params, rc.model)
    paths = metrics_mod.action_heatmap_export(a_ms, args.out, prefix=args.video)
    print(f"wrote {len(paths)} heatmaps to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def _add_common(p, *, seed=True, config=True):
    if config:
        p.add_argument("--config", help="JSON config file")
    if seed:
        p.add_argument("--seed", type=int, help="override every seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="starnet",
        description="online phase recognition testbed: data generation, "
                    "two-stage training, streaming evaluation, cost accounting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, help="number of videos")
    p.add_argument("--overlap", type=float, help="appearance overlap in [0,1]")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-backbone", help="stage 1: backbone + frame head")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--no-msta", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(fn=cmd_train_backbone)

    p = sub.add_parser("cache-features", help="freeze the backbone, cache features")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-msta", action="store_true")
    p.set_defaults(fn=cmd_cache_features)

    p = sub.add_parser("train-transformer", help="stage 2: transformer + heads")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--backbone-ckpt", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--no-msta", action="store_true")
    p.add_argument("--no-dsr", action="store_true",
                   help="drop the sequence regularizer (lam = 0)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(fn=cmd_train_transformer)

    p = sub.add_parser("eval", help="online inference + metrics over a split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--backbone-ckpt", required=True)
    p.add_argument("--transformer-ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--head", choices=("task", "aux"), default="task")
    p.add_argument("--pooled", action="store_true",
                   help="pool videos before phase metrics")
    p.add_argument("--no-msta", action="store_true")
    p.add_argument("--no-dsr", action="store_true",
                   help="label the output as the no-regularizer ablation")
    p.add_argument("--variant-label")
    p.add_argument("--heatmap-frames", type=int, default=24,
                   help="frames of the first video to export as heatmaps (0 skips)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cost", help="parameter/MAC accounting for a config")
    _add_common(p, seed=False)
    p.add_argument("--no-msta", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("ribbon", help="ribbon image from a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ribbon)

    p = sub.add_parser("heatmap", help="action-feature heatmaps for one video")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="backbone checkpoint")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=0, help="limit frames (0 = all)")
    p.set_defaults(fn=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STARNET_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ChecksumError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
