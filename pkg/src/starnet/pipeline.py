"""Two-stage training, feature caching, checkpoints, and online inference.

Stage 1 trains the conv backbone (with the temporal action module) plus the
frame-local head under frame-wise cross-entropy over sampled windows. The
frozen backbone then writes per-frame features for every training video
into a cache, and stage 2 trains the transformer and both heads on cached
feature windows under the full objective.

Online inference is strictly streaming: each incoming frame is pushed
through the backbone once (the action module keeps a small ring buffer of
past mid-stage features), and the transformer re-reads the feature window
ending at the current frame. Nothing ever touches a future frame, so the
prediction for frame n is bit-identical no matter how much video follows.
"""
from __future__ import annotations

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import recordio
from .losses import (RangeBounds, SequenceRanges, cross_entropy, dsr_loss,
                     sequence_ranges)
from .model import (ModelConfig, ModelParams, PredictionRecord, aux_logits,
                    backbone_forward, config_hash, head_probs, init_params,
                    task_probs)
from .recordio import ConfigMismatchError
from .synthdata import PhaseSequence
from .tensor import (NumericsError, Tape, Tensor, add, backward, constant,
                     conv2d, conv3d, mul, relu, reshape, sgd_step, softmax)

logger = logging.getLogger(__name__)

_STAGE_IDS = {"backbone": 0.0, "transformer": 1.0, "full": 2.0}
_STAGE_NAMES = {v: k for k, v in _STAGE_IDS.items()}


class TrainingDiverged(RuntimeError):
    """Optimization produced non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "backbone"
    epochs: int = 4
    batches_per_epoch: int = 80
    batch_size: int = 32
    lr: float = 1e-3
    lr_halving_period: int = 5
    lam: float = 1.0
    bounds: RangeBounds = field(default_factory=RangeBounds)
    normalize_dsr: bool = False
    aux_ce: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, batches_per_epoch, batch_size must be >= 1")
        if self.lr <= 0 or self.lr_halving_period < 1:
            raise ValueError("lr must be > 0 and lr_halving_period >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr(e) = lr0 * 2^-(floor(e / period)), epochs counted from 0."""
    return cfg.lr * 2.0 ** (-(epoch // cfg.lr_halving_period))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path) -> None:
    records = [("__meta__/stage", np.array([_STAGE_IDS[params.stage]])),
               ("__meta__/seed", np.array([float(params.seed)]))]
    records += [(name, t.data) for name, t in params.items()]
    recordio.write_records(path, bytes.fromhex(params.config_hash), records)


def load_checkpoint(path, cfg: ModelConfig | None = None) -> ModelParams:
    content_hash, records = recordio.read_records(path)
    if cfg is not None and content_hash != bytes.fromhex(config_hash(cfg)):
        raise ConfigMismatchError(
            f"{path}: checkpoint built for a different model config")
    meta = dict(records[:2])
    if "__meta__/stage" not in meta or "__meta__/seed" not in meta:
        raise recordio.FormatError(f"{path}: missing metadata records")
    from .tensor import parameter
    tensors = {name: parameter(arr) for name, arr in records[2:]}
    return ModelParams(tensors, content_hash.hex(),
                       _STAGE_NAMES[float(meta["__meta__/stage"][0])],
                       int(meta["__meta__/seed"][0]))


def _params_digest(params: ModelParams) -> bytes:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.digest()


# ---------------------------------------------------------------------------
# feature cache

@dataclass
class FeatureCache:
    """Per-frame post-backbone features keyed by video id."""
    features: dict
    cache_hash: str

    def window(self, video_id: str, end: int, seq_len: int) -> np.ndarray:
        feats = self.features[video_id]
        start = max(0, end - seq_len + 1)
        return feats[start:end + 1]


def _cache_hash(cfg: ModelConfig, params: ModelParams) -> bytes:
    h = hashlib.sha256()
    h.update(bytes.fromhex(config_hash(cfg)))
    h.update(_params_digest(params))
    return h.digest()


def cache_features(videos, params: ModelParams, cfg: ModelConfig, path) -> FeatureCache:
    """Run the frozen backbone over each full video and persist the features.

    Idempotent: an existing cache whose hash matches (same config, same
    checkpoint) is loaded without rewriting; a stale one is rejected.
    """
    if params.config_hash != config_hash(cfg):
        raise ConfigMismatchError("cache_features: params do not match config")
    want = _cache_hash(cfg, params)
    from pathlib import Path
    path = Path(path)
    if path.exists():
        have = recordio.peek_hash(path)
        if have != want:
            raise ConfigMismatchError(
                f"{path}: cache was built from a different config/checkpoint")
        return load_feature_cache(path)
    features = {}
    records = []
    for video in videos:
        feat = backbone_forward(Tensor(video.frames), params, cfg).data
        features[video.video_id] = feat
        for idx in range(feat.shape[0]):
            records.append((f"{video.video_id}/{idx}", feat[idx]))
    recordio.write_records(path, want, records)
    return FeatureCache(features, want.hex())


def load_feature_cache(path) -> FeatureCache:
    content_hash, records = recordio.read_records(path)
    per_video: dict[str, dict] = {}
    for name, arr in records:
        vid, _, idx = name.rpartition("/")
        per_video.setdefault(vid, {})[int(idx)] = arr
    features = {}
    for vid, frames in per_video.items():
        if sorted(frames) != list(range(len(frames))):
            raise recordio.FormatError(f"{path}: non-contiguous frames for {vid}")
        features[vid] = np.stack([frames[i] for i in range(len(frames))])
    return FeatureCache(features, content_hash.hex())


# ---------------------------------------------------------------------------
# window sampling

def _frame_index(videos) -> tuple:
    counts = np.array([v.num_frames for v in videos])
    return counts, np.cumsum(counts)


def _sample_windows(rng, videos, batch_size: int, seq_len: int) -> dict:
    """Uniform over (video, end-frame) pairs; grouped by window length."""
    counts, cum = _frame_index(videos)
    total = int(cum[-1])
    picks = rng.integers(0, total, size=batch_size)
    groups: dict[int, list] = {}
    for g in picks:
        vid = int(np.searchsorted(cum, g, side="right"))
        end = int(g - (cum[vid - 1] if vid else 0))
        length = min(end + 1, seq_len)
        groups.setdefault(length, []).append((vid, end))
    return groups


def _weighted_sum(terms) -> Tensor:
    total = None
    for tensor, weight in terms:
        piece = mul(tensor, constant(weight)) if weight != 1.0 else tensor
        total = piece if total is None else add(total, piece)
    return total


# ---------------------------------------------------------------------------
# stage 1: backbone + frame-local head

def train_backbone(videos, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """-> (ModelParams tagged 'backbone', per-epoch history)."""
    if not videos:
        raise ValueError("train_backbone: empty dataset")
    params = init_params(model_cfg, "backbone", seed=train_cfg.seed)
    trainable = list(params.values())
    rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 1)))
    history = []
    for epoch in range(train_cfg.epochs):
        lr = learning_rate(train_cfg, epoch)
        epoch_loss = 0.0
        for batch in range(train_cfg.batches_per_epoch):
            groups = _sample_windows(rng, videos, train_cfg.batch_size,
                                     model_cfg.seq_len)
            total_frames = sum(L * len(items) for L, items in groups.items())
            try:
                with Tape():
                    terms = []
                    for L in sorted(groups):
                        items = groups[L]
                        frames = np.stack([videos[v].frames[e - L + 1:e + 1]
                                           for v, e in items])
                        labels = np.concatenate(
                            [videos[v].labels[e - L + 1:e + 1] for v, e in items])
                        feat = backbone_forward(Tensor(frames), params, model_cfg)
                        logits = aux_logits(feat, params)
                        p = softmax(reshape(logits, (len(items) * L,
                                                     model_cfg.num_classes)), axis=-1)
                        terms.append((cross_entropy(p, labels),
                                      L * len(items) / total_frames))
                    loss = _weighted_sum(terms)
                    backward(loss)
                sgd_step(trainable, lr)
            except NumericsError as exc:
                raise TrainingDiverged(
                    f"stage 1 diverged at epoch {epoch} batch {batch}: {exc}") from exc
            epoch_loss += loss.item()
        history.append({"epoch": epoch, "lr": lr,
                        "ce": epoch_loss / train_cfg.batches_per_epoch})
        logger.info("stage1 epoch %d lr %.2e ce %.4f", epoch, lr, history[-1]["ce"])
    return params, history


# ---------------------------------------------------------------------------
# stage 2: transformer + both heads on cached features

def train_transformer(cache: FeatureCache, videos, backbone_params: ModelParams,
                      model_cfg: ModelConfig, train_cfg: TrainConfig):
    """-> (ModelParams tagged 'transformer' incl. both heads, history).

    The backbone stays frozen; the frame-local head continues from its
    stage-1 state and keeps training. With lam = 0 the run is exactly a
    cross-entropy-only run.
    """
    if not videos:
        raise ValueError("train_transformer: empty dataset")
    missing = [v.video_id for v in videos if v.video_id not in cache.features]
    if missing:
        raise ValueError(f"train_transformer: cache missing videos {missing}")
    from .tensor import parameter
    fresh = init_params(model_cfg, "transformer", seed=train_cfg.seed)
    tensors = dict(fresh.items())
    for name in ("aux.w", "aux.b"):
        tensors[name] = parameter(backbone_params[name].data.copy())
    params = ModelParams(tensors, config_hash(model_cfg), "transformer",
                         train_cfg.seed)
    trainable = list(params.values())
    by_id = {v.video_id: v for v in videos}
    vids = [v.video_id for v in videos]
    rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 2)))
    history = []
    for epoch in range(train_cfg.epochs):
        lr = learning_rate(train_cfg, epoch)
        ce_sum = dsr_sum = 0.0
        for batch in range(train_cfg.batches_per_epoch):
            groups = _sample_windows(rng, videos, train_cfg.batch_size,
                                     model_cfg.seq_len)
            total_frames = sum(L * len(items) for L, items in groups.items())
            total_windows = sum(len(items) for items in groups.values())
            try:
                with Tape():
                    ce_terms, dsr_terms = [], []
                    for L in sorted(groups):
                        items = groups[L]
                        feats = np.stack(
                            [cache.features[vids[v]][e - L + 1:e + 1]
                             for v, e in items])
                        labels = np.concatenate(
                            [by_id[vids[v]].labels[e - L + 1:e + 1] for v, e in items])
                        p_task, p_aux = head_probs(Tensor(feats), params, model_cfg)
                        flat_t = reshape(p_task, (len(items) * L, model_cfg.num_classes))
                        flat_a = reshape(p_aux, (len(items) * L, model_cfg.num_classes))
                        w = L * len(items) / total_frames
                        ce_terms.append((cross_entropy(flat_t, labels), w))
                        if train_cfg.aux_ce:
                            ce_terms.append((cross_entropy(flat_a, labels), w))
                        if train_cfg.lam:
                            ranges = sequence_ranges(L, train_cfg.bounds)
                            # batched term is a sum over windows, or a group
                            # mean when normalize_dsr; weight to a batch mean
                            dw = (len(items) / total_windows
                                  if train_cfg.normalize_dsr else 1.0 / total_windows)
                            dsr_terms.append(
                                (dsr_loss_batched(p_task, p_aux, ranges,
                                                  train_cfg.normalize_dsr), dw))
                    ce = _weighted_sum(ce_terms)
                    loss = ce
                    dsr_val = 0.0
                    if dsr_terms:
                        dsr = _weighted_sum(dsr_terms)
                        dsr_val = dsr.item()
                        loss = add(ce, mul(constant(train_cfg.lam), dsr))
                    backward(loss)
                sgd_step(trainable, lr)
            except NumericsError as exc:
                raise TrainingDiverged(
                    f"stage 2 diverged at epoch {epoch} batch {batch}: {exc}") from exc
            ce_sum += ce.item()
            dsr_sum += dsr_val
        history.append({"epoch": epoch, "lr": lr,
                        "ce": ce_sum / train_cfg.batches_per_epoch,
                        "dsr": dsr_sum / train_cfg.batches_per_epoch})
        logger.info("stage2 epoch %d lr %.2e ce %.4f dsr %.4f", epoch, lr,
                    history[-1]["ce"], history[-1]["dsr"])
    return params, history


def dsr_loss_batched(p_task: Tensor, p_aux: Tensor, ranges: SequenceRanges,
                     normalize: bool) -> Tensor:
    """Regularizer summed over a [B,L,C] batch of equal-length windows."""
    B, L, C = p_task.shape
    # tile the per-window range masks across the batch
    early = tuple(b * L + i for b in range(B) for i in ranges.early)
    late = tuple(b * L + j for b in range(B) for j in ranges.late)
    tiled = SequenceRanges(early, late, B * L)
    return dsr_loss(reshape(p_task, (B * L, C)), reshape(p_aux, (B * L, C)),
                    tiled, normalize=normalize)


# ---------------------------------------------------------------------------
# streaming inference

class OnlineRecognizer:
    """Frame-by-frame predictor over merged (backbone + transformer) params."""

    def __init__(self, params: ModelParams, cfg: ModelConfig):
        for needed in ("backbone.stage0.w", "aux.w", "task.w"):
            if needed not in params:
                raise ValueError(f"OnlineRecognizer: params missing {needed!r}")
        self.params = params
        self.cfg = cfg
        self._mid = deque(maxlen=cfg.msta.tau + 1)
        self._feat = deque(maxlen=cfg.seq_len)
        self._aux = deque(maxlen=cfg.seq_len)
        self._t = 0

    def _fused_actions(self, current: np.ndarray) -> np.ndarray:
        cfg, params = self.cfg, self.params
        tau = cfg.msta.tau
        d, h, w = current.shape
        buf = self._mid
        stack = np.zeros((d, tau, h, w))
        for k in range(1, tau + 1):
            if self._t < k:
                continue  # masked: scale-k differences need k past frames
            if cfg.msta.variant == "chained":
                stack[:, k - 1] = buf[-k] - buf[-k - 1]
            else:
                stack[:, k - 1] = buf[-1] - buf[-1 - k]
        pad = (0, cfg.msta.fusion_kernel // 2, cfg.msta.fusion_kernel // 2)
        groups = d if cfg.msta.depthwise_fusion else 1
        fused = conv3d(Tensor(stack), params["backbone.msta.w"],
                       bias=params.get("backbone.msta.b"),
                       padding=pad, groups=groups)
        return fused.data[:, 0]

    def _backbone_frame(self, frame: np.ndarray) -> np.ndarray:
        cfg, params = self.cfg, self.params
        x = Tensor(frame[None])
        for i, stride in enumerate(cfg.stage_strides):
            x = relu(conv2d(x, params[f"backbone.stage{i}.w"],
                            params[f"backbone.stage{i}.b"],
                            padding=1, stride=stride))
            if cfg.use_msta and i == cfg.msta_stage:
                s = x.data[0]
                self._mid.append(s)
                x = Tensor((s + self._fused_actions(s))[None])
        return x.data[0].transpose(1, 2, 0)   # [h, w, D]

    def push(self, frame: np.ndarray) -> PredictionRecord:
        """Consume one [C,H,W] frame, return the window's prediction record."""
        feat = self._backbone_frame(np.asarray(frame, dtype=np.float64))
        self._feat.append(feat)
        aux_row = softmax(aux_logits(Tensor(feat[None]), self.params), axis=-1)
        self._aux.append(aux_row.data[0])
        window = np.stack(self._feat)
        p_task = task_probs(Tensor(window), self.params, self.cfg).data
        record = PredictionRecord.from_probs(
            p_task, np.stack(self._aux), window_start=self._t - len(self._feat) + 1)
        self._t += 1
        return record


def online_infer(frames: np.ndarray, params: ModelParams, cfg: ModelConfig,
                 head: str = "task"):
    """Per-frame labels and records for a whole video, streamed causally.

    ``head`` selects which classifier's last-position prediction is emitted;
    'aux' gives the frame-local baseline.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError(f"online_infer: need non-empty [N,C,H,W], got {frames.shape}")
    if head not in ("task", "aux"):
        raise ValueError(f"online_infer: head must be task|aux, got {head!r}")
    recognizer = OnlineRecognizer(params, cfg)
    labels, records = [], []
    for n in range(frames.shape[0]):
        rec = recognizer.push(frames[n])
        probs = rec.p_task if head == "task" else rec.p_aux
        labels.append(int(np.argmax(probs[-1])))
        records.append(rec)
    return np.array(labels, dtype=np.int64), records


def predict_videos(videos, params: ModelParams, cfg: ModelConfig,
                   head: str = "task") -> list:
    """[(video_id, predicted, ground_truth)] over a list of PhaseSequence."""
    out = []
    for video in videos:
        pred, _ = online_infer(video.frames, params, cfg, head=head)
        out.append((video.video_id, pred, video.labels.copy()))
    return out
