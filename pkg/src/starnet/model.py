"""The full sequence recognizer: a small per-frame conv backbone carrying the
multi-scale temporal action module, a transformer that attends spatially
within each frame and then causally across frames, and two classifier heads.

The sequence ("task") head reads the temporally attended frame tokens; the
frame-local ("aux") head reads globally average-pooled backbone features.
Every temporal path is causal, so output at frame t is a pure function of
frames 0..t.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import msta as msta_mod
from .msta import MstaConfig
from .tensor import (Tensor, ShapeError, add, bias_add, bmm, constant, conv2d,
                     layer_norm, matmul, mul, parameter, reduce_mean, relu,
                     reshape, slice_axis, softmax, sub, transpose)

STAGES = ("backbone", "transformer", "full")
STAGE_PREFIXES = {
    "backbone": ("backbone.", "aux."),
    "transformer": ("transformer.", "task."),
    "full": ("backbone.", "aux.", "transformer.", "task."),
}


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 8
    seq_len: int = 20
    img_channels: int = 1
    img_size: int = 32
    stage_channels: tuple = (16, 32, 64)
    stage_strides: tuple = (2, 2, 2)
    use_msta: bool = True
    msta_stage: int = 1
    msta: MstaConfig = field(default_factory=MstaConfig)
    token_dim: int = 64
    num_heads: int = 4
    num_spatial_blocks: int = 1
    num_temporal_blocks: int = 2
    ffn_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.token_dim % self.num_heads:
            raise ValueError(
                f"token_dim {self.token_dim} not divisible by {self.num_heads} heads")
        if len(self.stage_channels) != len(self.stage_strides) or not self.stage_channels:
            raise ValueError("stage_channels and stage_strides must align, non-empty")
        if self.use_msta and not 0 <= self.msta_stage < len(self.stage_channels):
            raise ValueError(f"msta_stage {self.msta_stage} out of range")
        h, w = self.feature_grid()[-1]
        if h < 2 or w < 2:
            raise ValueError(
                f"input {self.img_size} too small for the stage strides "
                f"(final grid {h}x{w})")

    def feature_grid(self) -> list:
        """(h, w) after each stage; 3x3 kernels, padding 1."""
        h = w = self.img_size
        grid = []
        for s in self.stage_strides:
            h = (h + 2 - 3) // s + 1
            w = (w + 2 - 3) // s + 1
            grid.append((h, w))
        return grid

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def num_tokens(self) -> int:
        h, w = self.feature_grid()[-1]
        return h * w


def config_hash(cfg: ModelConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# parameter collection

class ModelParams:
    """Named, shaped parameter tensors with deterministic ordering.

    Metadata ties the collection to its config (hash), training stage tag
    and the seed it was initialised from.
    """

    def __init__(self, tensors: dict, config_hash: str, stage: str, seed: int):
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
        self._tensors = dict(tensors)
        self.config_hash = config_hash
        self.stage = stage
        self.seed = int(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def get(self, name: str, default=None):
        return self._tensors.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def subset(self, *prefixes) -> dict:
        return {n: t for n, t in self._tensors.items()
                if n.startswith(tuple(prefixes))}

    def merge(self, other: "ModelParams") -> "ModelParams":
        """Union of two stages; on shared names the other's tensors win
        (the later stage carries the further-trained copy)."""
        if self.config_hash != other.config_hash:
            raise ValueError("merge: config hashes differ")
        for name in set(self._tensors) & set(other._tensors):
            if self._tensors[name].shape != other._tensors[name].shape:
                raise ValueError(f"merge: shape clash for {name!r}")
        combined = dict(self._tensors)
        combined.update(other._tensors)
        return ModelParams(combined, self.config_hash, "full", self.seed)

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())


def param_shapes(cfg: ModelConfig, stage: str = "full") -> dict:
    """name -> (shape, init kind), in the order parameters are created.

    The single source of truth for both initialisation and the cost
    accountant's parameter totals.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    shapes: dict[str, tuple] = {}
    want_backbone = stage in ("backbone", "full")
    want_transformer = stage in ("transformer", "full")

    if want_backbone:
        c_in = cfg.img_channels
        for i, c_out in enumerate(cfg.stage_channels):
            shapes[f"backbone.stage{i}.w"] = ((c_out, c_in, 3, 3), "conv")
            shapes[f"backbone.stage{i}.b"] = ((c_out,), "zeros")
            c_in = c_out
        if cfg.use_msta:
            d = cfg.stage_channels[cfg.msta_stage]
            shapes["backbone.msta.w"] = (
                msta_mod.fusion_weight_shape(cfg.msta, d), "fusion")
            if not cfg.msta.bias_free_fusion:
                shapes["backbone.msta.b"] = ((d,), "zeros")
        shapes["aux.w"] = ((cfg.feature_channels, cfg.num_classes), "linear")
        shapes["aux.b"] = ((cfg.num_classes,), "zeros")

    if want_transformer:
        dim, ffn = cfg.token_dim, cfg.ffn_dim
        shapes["transformer.proj.w"] = ((cfg.feature_channels, dim), "linear")
        shapes["transformer.proj.b"] = ((dim,), "zeros")
        shapes["transformer.pos_spatial"] = ((cfg.num_tokens, dim), "posenc")
        shapes["transformer.pos_temporal"] = ((cfg.seq_len, dim), "posenc")
        for kind, count in (("sblock", cfg.num_spatial_blocks),
                            ("tblock", cfg.num_temporal_blocks)):
            for i in range(count):
                p = f"transformer.{kind}{i}"
                shapes[f"{p}.ln1.g"] = ((dim,), "ones")
                shapes[f"{p}.ln1.b"] = ((dim,), "zeros")
                for proj in ("wq", "wk", "wv", "wo"):
                    shapes[f"{p}.attn.{proj}"] = ((dim, dim), "linear")
                for b in ("bq", "bk", "bv", "bo"):
                    shapes[f"{p}.attn.{b}"] = ((dim,), "zeros")
                shapes[f"{p}.ln2.g"] = ((dim,), "ones")
                shapes[f"{p}.ln2.b"] = ((dim,), "zeros")
                shapes[f"{p}.ffn.w1"] = ((dim, ffn), "linear")
                shapes[f"{p}.ffn.b1"] = ((ffn,), "zeros")
                shapes[f"{p}.ffn.w2"] = ((ffn, dim), "linear")
                shapes[f"{p}.ffn.b2"] = ((dim,), "zeros")
        shapes["task.w"] = ((dim, cfg.num_classes), "linear")
        shapes["task.b"] = ((cfg.num_classes,), "zeros")
    return shapes


def _name_rng(seed: int, name: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence((int(seed), key)))


def _init_array(shape: tuple, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "posenc":
        return rng.normal(0.0, 0.02, shape)
    if kind == "conv":
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    if kind == "fusion":
        fan_in = shape[1] * shape[2] * shape[3] * shape[4]
        return rng.normal(0.0, math.sqrt(1.0 / fan_in), shape)
    if kind == "linear":
        fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, shape)
    raise ValueError(f"unknown init kind {kind!r}")


def init_params(cfg: ModelConfig, stage: str = "full",
                seed: int | None = None) -> ModelParams:
    """Fresh parameters for one training stage.

    Each tensor draws from its own (seed, name)-keyed stream, so initialising
    the stages separately and merging gives bit-identical values to
    initialising 'full' directly.
    """
    seed = cfg.seed if seed is None else seed
    tensors = {
        name: parameter(_init_array(shape, kind, _name_rng(seed, name)))
        for name, (shape, kind) in param_shapes(cfg, stage).items()
    }
    return ModelParams(tensors, config_hash(cfg), stage, seed)


# ---------------------------------------------------------------------------
# forward pieces

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis, any leading shape."""
    lead = x.shape[:-1]
    flat = x if x.data.ndim == 2 else reshape(x, (math.prod(lead), x.shape[-1]))
    out = bias_add(matmul(flat, w), b)
    if x.data.ndim == 2:
        return out
    return reshape(out, (*lead, w.shape[1]))


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal: position t may attend only to s <= t."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def _attention(x: Tensor, params, prefix: str, num_heads: int,
               causal: bool) -> Tensor:
    lead = x.shape[:-2]
    nlead = len(lead)
    L, dim = x.shape[-2], x.shape[-1]
    dh = dim // num_heads
    folds = math.prod(lead) * num_heads if lead else num_heads

    def split_heads(t):
        t = reshape(t, (*lead, L, num_heads, dh))
        t = transpose(t, (*range(nlead), nlead + 1, nlead, nlead + 2))
        return reshape(t, (folds, L, dh))

    q = split_heads(_linear(x, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]))
    k = split_heads(_linear(x, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"]))
    v = split_heads(_linear(x, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]))

    scores = mul(bmm(q, transpose(k, (0, 2, 1))), constant(1.0 / math.sqrt(dh)))
    mask = causal_mask(L)[None] if causal else None
    weights = softmax(scores, axis=-1, mask=mask)
    ctx = bmm(weights, v)

    ctx = reshape(ctx, (*lead, num_heads, L, dh))
    ctx = transpose(ctx, (*range(nlead), nlead + 1, nlead, nlead + 2))
    ctx = reshape(ctx, (*lead, L, dim))
    return _linear(ctx, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])


def _block(x: Tensor, params, prefix: str, num_heads: int, causal: bool) -> Tensor:
    # pre-norm: attention then feed-forward, both residual
    normed = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = add(x, _attention(normed, params, prefix, num_heads, causal))
    normed = layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    inner = relu(_linear(normed, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    return add(h, _linear(inner, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"]))


def spatial_attention_block(tokens: Tensor, params, cfg: ModelConfig,
                            index: int) -> Tensor:
    """Self-attention among the spatial tokens of each frame independently."""
    return _block(tokens, params, f"transformer.sblock{index}", cfg.num_heads,
                  causal=False)


def temporal_attention_block(seq_tokens: Tensor, params, cfg: ModelConfig,
                             index: int) -> Tensor:
    """Causally masked self-attention across frames."""
    return _block(seq_tokens, params, f"transformer.tblock{index}", cfg.num_heads,
                  causal=True)


def backbone_forward(frames: Tensor, params, cfg: ModelConfig,
                     return_actions: bool = False):
    """Shared-weight conv stages per frame, with the temporal action module
    applied once at the configured stage. Output is [T,H,W,D] (or batched
    [B,T,H,W,D]); with ``return_actions`` also the fused action maps."""
    if frames.data.ndim not in (4, 5):
        raise ShapeError(f"backbone_forward: frames must be [T,C,H,W] or "
                         f"[B,T,C,H,W], got {frames.shape}")
    batched = frames.data.ndim == 5
    if batched:
        B, T = frames.shape[0], frames.shape[1]
        x = reshape(frames, (B * T, *frames.shape[2:]))
    else:
        T = frames.shape[0]
        x = frames

    grid = cfg.feature_grid()
    actions = None
    for i, (ch, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides)):
        x = relu(conv2d(x, params[f"backbone.stage{i}.w"],
                        params[f"backbone.stage{i}.b"], padding=1, stride=stride))
        if cfg.use_msta and i == cfg.msta_stage:
            h, w = grid[i]
            if batched:
                y = transpose(reshape(x, (B, T, ch, h, w)), (0, 1, 3, 4, 2))
            else:
                y = transpose(x, (0, 2, 3, 1))
            fused = msta_mod.msta_forward(
                y, cfg.msta, params["backbone.msta.w"],
                params.get("backbone.msta.b"))
            if return_actions:
                actions = sub(fused, y)
            if batched:
                x = reshape(transpose(fused, (0, 1, 4, 2, 3)), (B * T, ch, h, w))
            else:
                x = transpose(fused, (0, 3, 1, 2))

    h, w = grid[-1]
    d = cfg.feature_channels
    if batched:
        feat = transpose(reshape(x, (B, T, d, h, w)), (0, 1, 3, 4, 2))
    else:
        feat = transpose(x, (0, 2, 3, 1))
    if return_actions:
        return feat, actions
    return feat


def aux_logits(feat: Tensor, params) -> Tensor:
    """Per-frame global average pooling over space, then one linear map."""
    pooled = reduce_mean(feat, axes=(feat.data.ndim - 3, feat.data.ndim - 2))
    return _linear(pooled, params["aux.w"], params["aux.b"])


def tokenize(feat: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Flatten the spatial grid into tokens, project, add both positional
    encodings. Sequences shorter than seq_len use the leading positions."""
    lead = feat.shape[:-3]
    L = lead[-1]
    if L > cfg.seq_len:
        raise ShapeError(f"tokenize: window length {L} exceeds seq_len {cfg.seq_len}")
    h, w, d = feat.shape[-3:]
    tokens = reshape(feat, (*lead, h * w, d))
    tokens = _linear(tokens, params["transformer.proj.w"], params["transformer.proj.b"])
    tokens = bias_add(tokens, params["transformer.pos_spatial"])

    pos_t = params["transformer.pos_temporal"]
    if L < cfg.seq_len:
        pos_t = slice_axis(pos_t, 0, 0, L)
    nlead = len(lead)
    # broadcast the per-frame encoding over the token axis
    swapped = transpose(tokens, (*range(nlead - 1), nlead, nlead - 1, nlead + 1))
    swapped = bias_add(swapped, pos_t)
    return transpose(swapped, (*range(nlead - 1), nlead, nlead - 1, nlead + 1))


def task_logits(seq_tokens: Tensor, params) -> Tensor:
    """Per-frame linear head over the temporally attended tokens."""
    return _linear(seq_tokens, params["task.w"], params["task.b"])


def task_probs(feat: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Sequence-head probabilities from post-backbone features."""
    tok = tokenize(feat, params, cfg)
    for i in range(cfg.num_spatial_blocks):
        tok = spatial_attention_block(tok, params, cfg, i)
    pooled = reduce_mean(tok, axes=(tok.data.ndim - 2,))
    for i in range(cfg.num_temporal_blocks):
        pooled = temporal_attention_block(pooled, params, cfg, i)
    return softmax(task_logits(pooled, params), axis=-1)


def head_probs(feat: Tensor, params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """(p_task, p_aux) from post-backbone features; both row-stochastic."""
    p_aux = softmax(aux_logits(feat, params), axis=-1)
    return task_probs(feat, params, cfg), p_aux


def forward_probs(frames: Tensor, params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    return head_probs(backbone_forward(frames, params, cfg), params, cfg)


@dataclass(frozen=True)
class PredictionRecord:
    """Per-frame probabilities of both heads for one window."""
    p_task: np.ndarray
    p_aux: np.ndarray
    labels: np.ndarray
    window_start: int

    @classmethod
    def from_probs(cls, p_task: np.ndarray, p_aux: np.ndarray,
                   window_start: int = 0) -> "PredictionRecord":
        p_task = np.asarray(p_task, dtype=np.float64)
        p_aux = np.asarray(p_aux, dtype=np.float64)
        for name, arr in (("p_task", p_task), ("p_aux", p_aux)):
            if arr.ndim != 2:
                raise ShapeError(f"{name} must be [T,C], got {arr.shape}")
            if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"{name} rows do not sum to 1 within 1e-9")
        labels = np.argmax(p_task, axis=1)
        return cls(p_task, p_aux, labels, int(window_start))


def starnet_forward(frames: Tensor, params, cfg: ModelConfig,
                    window_start: int = 0) -> PredictionRecord:
    """End-to-end pass over one frame window."""
    p_task, p_aux = forward_probs(frames, params, cfg)
    return PredictionRecord.from_probs(p_task.data, p_aux.data, window_start)


def action_features(frames: Tensor, params, cfg: ModelConfig) -> np.ndarray:
    """Fused multi-scale action maps [T,H,W,D] for a frame sequence."""
    if not cfg.use_msta:
        raise ValueError("action_features: model configured without the action module")
    _, actions = backbone_forward(frames, params, cfg, return_actions=True)
    return actions.data
