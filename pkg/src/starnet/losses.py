"""Training objectives: cross-entropy, KL divergence, and the dual-classifier
sequence regularizer with directional stop-gradients.

The regularizer couples two per-frame classifiers over disjoint frame
ranges of a window: on the early range the sequence head is pulled toward
the (frozen) frame-local head, on the late range the frame-local head is
pulled toward the (frozen) sequence head. Probabilities are floored at
1e-12 before any log, since KL is undefined at exact zeros.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, add, clamp_min, constant, detach,
                     gather_rows, log, mul, reduce_mean, reduce_sum, sub)

PROB_FLOOR = 1e-12
_STOCHASTIC_TOL = 1e-6


def _check_stochastic(p: Tensor, name: str) -> None:
    rows = p.data.reshape(-1, p.shape[-1])
    if np.any(rows < -_STOCHASTIC_TOL):
        raise ValueError(f"{name}: negative probabilities")
    if np.any(np.abs(rows.sum(axis=1) - 1.0) > _STOCHASTIC_TOL):
        raise ValueError(f"{name}: rows do not sum to 1")


def cross_entropy(p: Tensor, y) -> Tensor:
    """Mean over frames of -log p[t, y[t]], with the log input clamped.

    ``p`` is [T,C] row-stochastic, ``y`` integer labels in [0,C).
    """
    if p.data.ndim != 2:
        raise ShapeError(f"cross_entropy: p must be [T,C], got {p.shape}")
    _check_stochastic(p, "cross_entropy")
    picked = clamp_min(gather_rows(p, y), PROB_FLOOR)
    return mul(reduce_mean(log(picked)), constant(-1.0))


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Kullback-Leibler divergence sum_c p_c (ln p_c - ln q_c), both floored.

    Accepts matching [C] vectors or [T,C] row batches; for batches the
    per-row divergences are summed.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shapes differ, {p.shape} vs {q.shape}")
    _check_stochastic(p, "kl_div p")
    _check_stochastic(q, "kl_div q")
    pf = clamp_min(p, PROB_FLOOR)
    qf = clamp_min(q, PROB_FLOOR)
    return reduce_sum(mul(pf, sub(log(pf), log(qf))))


@dataclass(frozen=True)
class SequenceRanges:
    """Disjoint early/late frame-index sets of a length-T window."""
    early: tuple = ()
    late: tuple = ()
    seq_len: int = 0

    def __post_init__(self):
        e, l = set(self.early), set(self.late)
        if e & l:
            raise ValueError(f"early/late ranges overlap: {sorted(e & l)}")
        for i in e | l:
            if not 0 <= i < self.seq_len:
                raise ValueError(f"range index {i} outside [0, {self.seq_len})")


@dataclass(frozen=True)
class RangeBounds:
    """Fractional window positions delimiting the early and late ranges."""
    early_lo: float = 0.2
    early_hi: float = 0.6
    late_lo: float = 0.8
    late_hi: float = 1.0

    def __post_init__(self):
        for lo, hi in ((self.early_lo, self.early_hi), (self.late_lo, self.late_hi)):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"bounds must satisfy 0 <= lo <= hi <= 1, got {lo}, {hi}")


def sequence_ranges(seq_len: int, bounds: RangeBounds = RangeBounds()) -> SequenceRanges:
    """Half-open index sets [floor(lo*T), floor(hi*T)) for both ranges."""
    if seq_len < 1:
        raise ValueError(f"sequence_ranges: seq_len must be >= 1, got {seq_len}")
    early = range(int(np.floor(bounds.early_lo * seq_len)),
                  int(np.floor(bounds.early_hi * seq_len)))
    late = range(int(np.floor(bounds.late_lo * seq_len)),
                 int(np.floor(bounds.late_hi * seq_len)))
    overlap = set(early) & set(late)
    if overlap:
        raise ValueError(f"sequence_ranges: ranges overlap at {sorted(overlap)}")
    return SequenceRanges(tuple(early), tuple(late), seq_len)


def _range_mask(indices, seq_len: int) -> np.ndarray:
    m = np.zeros(seq_len)
    for i in indices:
        m[i] = 1.0
    return m


def _masked_kl_rows(p: Tensor, q_const: Tensor, mask: np.ndarray) -> Tensor:
    # sum over masked rows of KL(p_row || q_row); q_const carries no grad
    pf = clamp_min(p, PROB_FLOOR)
    qf = clamp_min(q_const, PROB_FLOOR)
    rows = reduce_sum(mul(pf, sub(log(pf), log(qf))), axes=(1,))
    return reduce_sum(mul(rows, constant(mask)))


def dsr_loss(p_task: Tensor, p_aux: Tensor, ranges: SequenceRanges,
             normalize: bool = False) -> Tensor:
    """Dual-classifier sequence regularizer over one window.

    sum_{i in early} KL(p_task[i] || stop(p_aux[i]))
      + sum_{j in late} KL(p_aux[j] || stop(p_task[j]))

    The stop-gradient makes the first term blind to the frame-local head's
    producers and the second blind to the sequence head's. ``normalize``
    divides each term by its range size instead of summing.
    """
    if p_task.shape != p_aux.shape or p_task.data.ndim != 2:
        raise ShapeError(
            f"dsr_loss: need matching [T,C], got {p_task.shape}, {p_aux.shape}")
    T = p_task.shape[0]
    if ranges.seq_len != T:
        raise ShapeError(f"dsr_loss: ranges built for T={ranges.seq_len}, input T={T}")
    _check_stochastic(p_task, "dsr_loss p_task")
    _check_stochastic(p_aux, "dsr_loss p_aux")

    e_mask = _range_mask(ranges.early, T)
    l_mask = _range_mask(ranges.late, T)
    if normalize:
        if ranges.early:
            e_mask = e_mask / len(ranges.early)
        if ranges.late:
            l_mask = l_mask / len(ranges.late)
    early_term = _masked_kl_rows(p_task, detach(p_aux), e_mask)
    late_term = _masked_kl_rows(p_aux, detach(p_task), l_mask)
    return add(early_term, late_term)


def total_loss(p_task: Tensor, p_aux: Tensor, y, ranges: SequenceRanges,
               lam: float = 1.0, aux_ce: bool = True,
               normalize_dsr: bool = False) -> Tensor:
    """Frame-averaged cross-entropy plus lam times the regularizer.

    Cross-entropy covers both classifiers by default so the frame-local
    head keeps supervised grounding while being regularized; ``aux_ce``
    False restricts it to the sequence head.
    """
    if lam < 0:
        raise ValueError(f"total_loss: lam must be >= 0, got {lam}")
    loss = cross_entropy(p_task, y)
    if aux_ce:
        loss = add(loss, cross_entropy(p_aux, y))
    if lam != 0.0:
        loss = add(loss, mul(constant(lam),
                             dsr_loss(p_task, p_aux, ranges,
                                      normalize=normalize_dsr)))
    return loss
