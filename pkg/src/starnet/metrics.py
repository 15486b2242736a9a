"""Evaluation protocol, significance testing, visual exports, and the
parameter/MAC accountant.

Precision, recall and Jaccard are computed phase-wise; the default
aggregation takes each video's mean over the phases it contains, then
reports mean and population standard deviation across videos. A pooled
alternative concatenates all videos first and reports spread across phases.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import stdtr

from .model import ModelConfig, param_shapes

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (128, 128, 128),
    (255, 105, 180), (0, 100, 0), (139, 69, 19), (0, 0, 128),
)


def accuracy(pred, gt) -> float:
    """Percentage of frames whose predicted label matches ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"accuracy: shapes differ, {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("accuracy: empty input")
    return 100.0 * float(np.mean(pred == gt))


@dataclass(frozen=True)
class ConfusionSummary:
    """Per-phase TP/FP/FN counts for one video."""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    total_frames: int


def confusion_counts(pred, gt, num_classes: int) -> ConfusionSummary:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_counts: shapes differ, {pred.shape} vs {gt.shape}")
    if pred.size and (min(pred.min(), gt.min()) < 0
                      or max(pred.max(), gt.max()) >= num_classes):
        raise ValueError(f"confusion_counts: labels outside [0, {num_classes})")
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        tp[c] = int(np.sum((pred == c) & (gt == c)))
        fp[c] = int(np.sum((pred == c) & (gt != c)))
        fn[c] = int(np.sum((pred != c) & (gt == c)))
    return ConfusionSummary(tp, fp, fn, int(pred.size))


@dataclass(frozen=True)
class PhaseStats:
    precision: float
    recall: float
    jaccard: float


@dataclass(frozen=True)
class PhaseMetrics:
    """Phase-wise stats for one sequence plus their mean over present phases."""
    per_phase: dict
    mean_precision: float
    mean_recall: float
    mean_jaccard: float


def _ratio(num: int, den: int, what: str, phase: int) -> float:
    if den == 0:
        logger.warning("phase %d: %s is 0/0, reported as 0", phase, what)
        return 0.0
    return num / den


def phase_metrics(pred, gt, num_classes: int) -> PhaseMetrics:
    """PR/RE/JA per phase; phases absent from both pred and gt are excluded."""
    cm = confusion_counts(pred, gt, num_classes)
    per_phase = {}
    for c in range(num_classes):
        if cm.tp[c] + cm.fp[c] + cm.fn[c] == 0:
            continue  # phase absent everywhere
        per_phase[c] = PhaseStats(
            precision=_ratio(cm.tp[c], cm.tp[c] + cm.fp[c], "precision", c),
            recall=_ratio(cm.tp[c], cm.tp[c] + cm.fn[c], "recall", c),
            jaccard=cm.tp[c] / (cm.tp[c] + cm.fp[c] + cm.fn[c]),
        )
    if not per_phase:
        raise ValueError("phase_metrics: no phase present in pred or gt")
    return PhaseMetrics(
        per_phase,
        float(np.mean([s.precision for s in per_phase.values()])),
        float(np.mean([s.recall for s in per_phase.values()])),
        float(np.mean([s.jaccard for s in per_phase.values()])),
    )


def label_prior_ceiling(gts) -> float:
    """Best accuracy (%) of a constant predictor over the pooled labels."""
    pooled = np.concatenate([np.asarray(g) for g in gts])
    _, counts = np.unique(pooled, return_counts=True)
    return 100.0 * counts.max() / pooled.size


def summarize_videos(results, num_classes: int, pooled: bool = False) -> dict:
    """Aggregate (video_id, pred, gt) triples into the metrics JSON payload.

    Default: per-video phase means, then mean and population std across
    videos. ``pooled`` concatenates everything and reports spread across
    phases instead.
    """
    if not results:
        raise ValueError("summarize_videos: no results")
    per_video_ac = [accuracy(p, g) for _, p, g in results]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "aggregation": "pooled" if pooled else "per_video",
        "num_videos": len(results),
        "label_prior_ceiling": label_prior_ceiling([g for _, _, g in results]),
        "accuracy": {
            "mean": float(np.mean(per_video_ac)),
            "std": float(np.std(per_video_ac)),
            "per_video": {vid: ac for (vid, _, _), ac
                          in zip(results, per_video_ac)},
        },
    }
    if pooled:
        pred = np.concatenate([p for _, p, _ in results])
        gt = np.concatenate([g for _, _, g in results])
        pm = phase_metrics(pred, gt, num_classes)
        spread = {
            "precision": [s.precision for s in pm.per_phase.values()],
            "recall": [s.recall for s in pm.per_phase.values()],
            "jaccard": [s.jaccard for s in pm.per_phase.values()],
        }
        for key, values in spread.items():
            payload[key] = {"mean": 100.0 * float(np.mean(values)),
                            "std": 100.0 * float(np.std(values))}
    else:
        per_video = [phase_metrics(p, g, num_classes) for _, p, g in results]
        for key, attr in (("precision", "mean_precision"),
                          ("recall", "mean_recall"),
                          ("jaccard", "mean_jaccard")):
            values = [getattr(pm, attr) for pm in per_video]
            payload[key] = {"mean": 100.0 * float(np.mean(values)),
                            "std": 100.0 * float(np.std(values))}
    return payload


def paired_ttest(ac_a, ac_b) -> tuple:
    """Two-sided paired t-test over per-video accuracies -> (t, p).

    All-zero differences are the degenerate no-signal case (t=0, p=1);
    identical nonzero differences give an infinite statistic with p=0.
    """
    a = np.asarray(ac_a, dtype=np.float64)
    b = np.asarray(ac_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"paired_ttest: need two equal series of >= 2, "
                         f"got {a.shape} vs {b.shape}")
    d = a - b
    if np.all(d == 0.0):
        return 0.0, 1.0
    sd = d.std(ddof=1)
    mean = d.mean()
    if sd == 0.0:
        return float(np.sign(mean) * np.inf), 0.0
    t = mean / (sd / np.sqrt(d.size))
    p = 2.0 * float(stdtr(d.size - 1, -abs(t)))
    return float(t), p


# ---------------------------------------------------------------------------
# visual exports (PPM/PGM are plain byte formats, no imaging dependency)

def run_length_segments(labels) -> list:
    """[(start, length, phase)] covering the sequence exactly."""
    labels = np.asarray(labels)
    segments = []
    start = 0
    for i in range(1, labels.size + 1):
        if i == labels.size or labels[i] != labels[start]:
            segments.append((start, i - start, int(labels[start])))
            start = i
    return segments


def _write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.astype(np.uint8).tobytes())


def _write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.astype(np.uint8).tobytes())


def ribbon_export(pred, gt, path, palette=DEFAULT_PALETTE,
                  row_height: int = 12) -> tuple:
    """Two-row timeline (pred over gt), one pixel column per frame.

    Writes ``path`` as P6 PPM plus a run-length CSV alongside; returns both
    paths.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("ribbon_export: pred/gt must be equal non-empty 1-D")
    top = max(int(pred.max()), int(gt.max()))
    if top >= len(palette) or min(int(pred.min()), int(gt.min())) < 0:
        raise ValueError(f"ribbon_export: labels exceed palette of {len(palette)}")
    lut = np.asarray(palette, dtype=np.uint8)
    rows = np.concatenate([np.repeat(lut[pred][None], row_height, axis=0),
                           np.repeat(lut[gt][None], row_height, axis=0)])
    path = Path(path)
    _write_ppm(path, rows)
    csv_path = path.with_suffix(".csv")
    lines = ["series,start,length,phase"]
    for series, labels in (("pred", pred), ("gt", gt)):
        lines += [f"{series},{s},{n},{p}" for s, n, p in run_length_segments(labels)]
    csv_path.write_text("\n".join(lines) + "\n")
    return path, csv_path


def action_heatmap_export(a_ms: np.ndarray, out_dir, prefix: str = "frame") -> list:
    """Per-frame channel-magnitude heatmaps of fused action features.

    The L2 magnitude over channels is min-max normalized across the whole
    sequence (max maps to 255) and written as one P5 grayscale image per
    frame.
    """
    a_ms = np.asarray(a_ms, dtype=np.float64)
    if a_ms.ndim != 4:
        raise ValueError(f"action_heatmap_export: need [T,H,W,D], got {a_ms.shape}")
    mag = np.sqrt(np.sum(a_ms * a_ms, axis=-1))
    lo, hi = mag.min(), mag.max()
    norm = np.zeros_like(mag) if hi == lo else (mag - lo) / (hi - lo)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(mag.shape[0]):
        p = out_dir / f"{prefix}_{t:04d}.pgm"
        _write_pgm(p, np.round(norm[t] * 255.0))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# parameter and MAC accounting

@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    """Symbolic per-layer parameter and multiply-accumulate counts for one
    window of seq_len frames; totals equal the sums of the parts, and the
    MAC total matches an instrumented forward pass exactly."""
    layers: tuple
    total_params: int
    total_macs: int
    backbone_macs: int
    msta_fusion_macs: int
    msta_subtract_ops: int
    msta_residual_adds: int
    assumptions: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def cost_report(cfg: ModelConfig) -> CostReport:
    shapes = param_shapes(cfg, "full")

    def psize(prefix: str) -> int:
        total = 0
        for name, (shape, _) in shapes.items():
            if name.startswith(prefix):
                n = 1
                for e in shape:
                    n *= e
                total += n
        return total

    T = cfg.seq_len
    layers = []
    backbone_macs = 0
    msta_fusion = msta_subs = msta_adds = 0

    c_prev = cfg.img_channels
    grid = cfg.feature_grid()
    for i, c_out in enumerate(cfg.stage_channels):
        h, w = grid[i]
        macs = T * h * w * c_out * (c_prev * 9)
        layers.append(LayerCost(f"backbone.stage{i}", psize(f"backbone.stage{i}."), macs))
        backbone_macs += macs
        if cfg.use_msta and i == cfg.msta_stage:
            d = c_out
            k = cfg.msta.fusion_kernel
            group_width = 1 if cfg.msta.depthwise_fusion else d
            msta_fusion = T * h * w * d * (group_width * cfg.msta.tau * k * k)
            msta_subs = cfg.msta.tau * T * h * w * d
            msta_adds = T * h * w * d
            layers.append(LayerCost("backbone.msta", psize("backbone.msta."),
                                    msta_fusion))
        c_prev = c_out

    d_last = cfg.feature_channels
    n_tok = cfg.num_tokens
    dim, ffn, C = cfg.token_dim, cfg.ffn_dim, cfg.num_classes
    layers.append(LayerCost("aux", psize("aux."), T * d_last * C))
    layers.append(LayerCost("transformer.proj", psize("transformer.proj."),
                            T * n_tok * d_last * dim))
    layers.append(LayerCost("transformer.pos", psize("transformer.pos_"), 0))
    for i in range(cfg.num_spatial_blocks):
        macs = (4 * T * n_tok * dim * dim + 2 * T * n_tok * n_tok * dim
                + 2 * T * n_tok * dim * ffn)
        layers.append(LayerCost(f"transformer.sblock{i}",
                                psize(f"transformer.sblock{i}."), macs))
    for i in range(cfg.num_temporal_blocks):
        macs = 4 * T * dim * dim + 2 * T * T * dim + 2 * T * dim * ffn
        layers.append(LayerCost(f"transformer.tblock{i}",
                                psize(f"transformer.tblock{i}."), macs))
    layers.append(LayerCost("task", psize("task."), T * dim * C))

    total_params = sum(l.params for l in layers)
    check = 0
    for shape, _ in shapes.values():
        n = 1
        for e in shape:
            n *= e
        check += n
    if total_params != check:
        raise AssertionError("cost_report: per-layer params do not cover the model")
    return CostReport(
        layers=tuple(layers),
        total_params=total_params,
        total_macs=sum(l.macs for l in layers),
        backbone_macs=backbone_macs,
        msta_fusion_macs=msta_fusion,
        msta_subtract_ops=msta_subs,
        msta_residual_adds=msta_adds,
        assumptions={"window_frames": T, "img_size": cfg.img_size,
                     "img_channels": cfg.img_channels},
    )
