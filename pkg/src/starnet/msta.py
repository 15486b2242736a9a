"""Multi-scale temporal action features over frame-feature sequences.

The building block is a temporal-difference step: shift the feature
sequence one frame later (zero-padding the front, truncating the tail),
subtract it from its input elementwise, and zero the leading frames whose
differences are padding artifacts. Chaining the step across ``tau`` scales
yields per-scale action maps that a single 3-D convolution collapses back
to the input shape, added residually.

Feature maps are [T,H,W,D] (time, height, width, channels) per the module
contract; a leading batch axis [B,T,H,W,D] is accepted everywhere.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, apply_op, add, sub, conv3d, reshape,
                     concat, transpose)

VARIANTS = ("chained", "anchored")


@dataclass(frozen=True)
class MstaConfig:
    """Knobs of the multi-scale temporal action module.

    tau              number of temporal scales (chained difference steps)
    fusion_kernel    spatial extent of the fusion conv kernel, odd
    variant          'chained': a_k differences adjacent delayed streams;
                     'anchored': a_k differences the undelayed input against
                     the k-delayed stream
    bias_free_fusion drop the fusion bias (identity checks rely on this)
    depthwise_fusion fuse per channel (groups = D) instead of full D-to-D
                     mixing; the default keeps the module's cost a small
                     fraction of the 2-D stages it augments
    """
    tau: int = 5
    fusion_kernel: int = 1
    variant: str = "chained"
    bias_free_fusion: bool = False
    depthwise_fusion: bool = True

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.fusion_kernel < 1 or self.fusion_kernel % 2 == 0:
            raise ValueError(f"fusion_kernel must be odd, got {self.fusion_kernel}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def _time_axis(f: Tensor) -> int:
    if f.data.ndim == 4:
        return 0
    if f.data.ndim == 5:
        return 1
    raise ShapeError(f"feature map must be [T,H,W,D] or [B,T,H,W,D], got {f.shape}")


def _axis_slice(ndim: int, axis: int, sl: slice) -> tuple:
    return tuple(sl if i == axis else slice(None) for i in range(ndim))


def temporal_delay(f: Tensor, k: int) -> Tensor:
    """Shift the sequence k frames later: out[t] = f[t-k], zero for t < k.

    The last k frames of f fall off the end; output shape equals input
    shape. Composes exactly: delaying by 1 twice equals delaying by 2.
    """
    if k < 1:
        raise ValueError(f"temporal_delay: k must be >= 1, got {k}")
    axis = _time_axis(f)
    T = f.shape[axis]
    out = np.zeros_like(f.data)
    if k < T:
        dst = _axis_slice(f.data.ndim, axis, slice(k, T))
        src = _axis_slice(f.data.ndim, axis, slice(0, T - k))
        out[dst] = f.data[src]

        def backward(g):
            gi = np.zeros_like(g)
            gi[src] = g[dst]
            return (gi,)
    else:
        def backward(g):
            return (np.zeros_like(g),)

    return apply_op("temporal_delay", (f,), out, backward)


def action_mask(a: Tensor, k: int) -> Tensor:
    """Zero the first k frames, where scale-k differences are invalid."""
    if k < 1:
        raise ValueError(f"action_mask: k must be >= 1, got {k}")
    axis = _time_axis(a)
    T = a.shape[axis]
    head = _axis_slice(a.data.ndim, axis, slice(0, min(k, T)))
    out = a.data.copy()
    out[head] = 0.0

    def backward(g):
        gi = g.copy()
        gi[head] = 0.0
        return (gi,)

    return apply_op("action_mask", (a,), out, backward)


def tdiff(g: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """One temporal-difference step at scale k.

    ``g`` is the (k-1)-times delayed feature stream (k=1 means the raw
    input). Returns (action, delayed): exactly one shift and one
    elementwise subtraction, then the scale-k mask.
    """
    delayed = temporal_delay(g, 1)
    action = action_mask(sub(g, delayed), k)
    return action, delayed


def fusion_weight_shape(cfg: MstaConfig, channels: int) -> tuple:
    """Kernel shape the fusion conv expects for D input channels."""
    group_width = 1 if cfg.depthwise_fusion else channels
    return (channels, group_width, cfg.tau, cfg.fusion_kernel, cfg.fusion_kernel)


def msta_forward(f: Tensor, cfg: MstaConfig, w_fusion: Tensor,
                 b_fusion: Tensor | None = None) -> Tensor:
    """Multi-scale action features added residually onto ``f``.

    Per-scale action maps are stacked along a new scale axis and collapsed
    by one 3-D convolution whose kernel spans all tau scales (no padding on
    the scale axis) and ``fusion_kernel`` pixels spatially (same-padded), so
    the output shape equals the input shape. Frame t of the output depends
    only on input frames <= t.
    """
    axis = _time_axis(f)
    T = f.shape[axis]
    if cfg.tau >= T:
        warnings.warn(
            f"tau={cfg.tau} >= sequence length {T}: deepest scales are fully masked",
            RuntimeWarning, stacklevel=2)
    expected = fusion_weight_shape(cfg, f.shape[-1])
    if w_fusion.shape != expected:
        raise ShapeError(
            f"msta_forward: fusion kernel {w_fusion.shape} incompatible with "
            f"tau={cfg.tau}, D={f.shape[-1]}; expected {expected}")
    if cfg.bias_free_fusion and b_fusion is not None:
        raise ValueError("msta_forward: bias passed but config is bias_free_fusion")

    actions = []
    delayed = f
    for k in range(1, cfg.tau + 1):
        if cfg.variant == "chained":
            a_k, delayed = tdiff(delayed, k)
        else:
            delayed = temporal_delay(delayed, 1)
            a_k = action_mask(sub(f, delayed), k)
        actions.append(a_k)

    # stack on a new scale axis right after time: [.., T, tau, H, W, D]
    scale_axis = axis + 1
    stacked = concat(
        [reshape(a, a.shape[:scale_axis] + (1,) + a.shape[scale_axis:])
         for a in actions], axis=scale_axis)

    H, W, D = f.shape[-3], f.shape[-2], f.shape[-1]
    # channels-first volumes for the conv: [N, D, tau, H, W] with N = frames
    if f.data.ndim == 4:
        vol = transpose(stacked, (0, 4, 1, 2, 3))
        n_frames = T
    else:
        B = f.shape[0]
        vol = reshape(transpose(stacked, (0, 1, 5, 2, 3, 4)),
                      (B * T, D, cfg.tau, H, W))
        n_frames = B * T

    pad = (0, cfg.fusion_kernel // 2, cfg.fusion_kernel // 2)
    groups = D if cfg.depthwise_fusion else 1
    fused = conv3d(vol, w_fusion, bias=b_fusion, padding=pad, groups=groups)
    fused = reshape(fused, (n_frames, D, H, W))

    if f.data.ndim == 4:
        a_ms = transpose(fused, (0, 2, 3, 1))
    else:
        a_ms = transpose(reshape(fused, (f.shape[0], T, D, H, W)),
                         (0, 1, 3, 4, 2))
    return add(f, a_ms)


def multiscale_actions(f: Tensor, cfg: MstaConfig) -> list[Tensor]:
    """The per-scale action maps alone (visualization hook)."""
    actions = []
    delayed = f
    for k in range(1, cfg.tau + 1):
        if cfg.variant == "chained":
            a_k, delayed = tdiff(delayed, k)
        else:
            delayed = temporal_delay(delayed, 1)
            a_k = action_mask(sub(f, delayed), k)
        actions.append(a_k)
    return actions
