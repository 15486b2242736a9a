"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Three constraints are enforced everywhere:

* every stored scalar is finite; an op that would produce NaN or Inf raises
  ``NumericsError`` instead of letting it propagate,
* elementwise broadcasting is restricted to scalar-vs-tensor (plus the
  dedicated ``bias_add``) so each backward rule stays auditable,
* a ``Tape`` is explicitly created and dropped per forward pass; nothing is
  recorded through global mutable state, and a tape together with its
  tensors is confined to the thread that created it.

An optional ``OpCounter`` context tallies multiply-accumulate and
elementwise add/subtract volume, letting the cost accountant verify its
symbolic totals against an instrumented forward pass.
"""
from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or invalid axes."""


class TapeError(RuntimeError):
    """backward() called on a tensor that was not produced on a tape."""


_LOCAL = threading.local()


def _tapes() -> list:
    try:
        return _LOCAL.tapes
    except AttributeError:
        _LOCAL.tapes = []
        return _LOCAL.tapes


def _counters() -> list:
    try:
        return _LOCAL.counters
    except AttributeError:
        _LOCAL.counters = []
        return _LOCAL.counters


def _active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


def _count(field: str, amount: int) -> None:
    for counter in _counters():
        setattr(counter, field, getattr(counter, field) + int(amount))


class OpCounter:
    """Tallies op volume while active: MACs plus elementwise adds/subs."""

    def __init__(self):
        self.macs = 0
        self.adds = 0
        self.subs = 0

    def __enter__(self) -> "OpCounter":
        _counters().append(self)
        return self

    def __exit__(self, *exc):
        _counters().remove(self)
        return False


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn", "tape")

    def __init__(self, op, inputs, out, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended as ops execute, so the list is topological by
    construction: every node appears after the producers of its inputs.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        if _tapes().pop() is not self:
            raise TapeError("tape stack corrupted: tapes exited out of order")
        return False

    def check_topological(self) -> bool:
        """Validate producer-before-consumer ordering (test hook)."""
        seen: set[int] = set()
        for node in self.nodes:
            for t in node.inputs:
                if t.node is not None and t.node.tape is self and id(t) not in seen:
                    return False
            seen.add(id(node.out))
        return True


class Tensor:
    """Dense row-major float64 array, optionally participating in autodiff.

    ``grad_enabled`` marks a leaf whose gradient is accumulated by
    ``backward``; intermediate results carry gradients only transiently
    during the backward sweep. Tensors are immutable by convention once
    built, except for leaf parameters updated in place by ``sgd_step``.
    """

    __slots__ = ("data", "grad", "grad_enabled", "node", "_requires")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor initialised with non-finite values")
        self.data = arr
        self.grad_enabled = bool(grad_enabled)
        self.grad = np.zeros_like(arr) if grad_enabled else None
        self.node = None
        self._requires = bool(grad_enabled)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"


def parameter(data) -> Tensor:
    """A trainable leaf: gradient storage allocated and accumulated."""
    return Tensor(data, grad_enabled=True)


def constant(data) -> Tensor:
    return Tensor(data)


def apply_op(name: str, inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op result, recording it when a tape is live and grads can flow.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in order. Other modules use this hook to define their own ops
    with auditable backward rules.
    """
    try:
        out = Tensor(out_data)
    except NumericsError:
        raise NumericsError(f"operation '{name}' produced NaN or Inf") from None
    tape = _active_tape()
    if tape is not None and any(t._requires for t in inputs):
        out._requires = True
        node = _Node(name, tuple(inputs), out, backward_fn, tape)
        out.node = node
        tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (shapes equal, or one operand scalar)

def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(
        f"{op}: shapes {a.shape} and {b.shape} are neither equal nor "
        "scalar-broadcastable"
    )


def _collapse(g: np.ndarray, t: Tensor) -> np.ndarray:
    # fold an elementwise gradient back onto a scalar operand
    if g.shape == t.data.shape:
        return g
    return np.sum(g).reshape(t.data.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = a.data + b.data
    _count("adds", out.size)
    return apply_op("add", (a, b), out,
                    lambda g: (_collapse(g, a), _collapse(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out = a.data - b.data
    _count("subs", out.size)
    return apply_op("sub", (a, b), out,
                    lambda g: (_collapse(g, a), _collapse(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = a.data * b.data
    return apply_op("mul", (a, b), out,
                    lambda g: (_collapse(g * b.data, a), _collapse(g * a.data, b)))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch by op name; supported: add, sub, mul."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"elementwise: unknown op '{op}'") from None
    return fn(a, b)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` over the trailing axes of ``x``.

    ``b.shape`` must equal ``x.shape[-b.ndim:]``; the backward rule sums the
    gradient over the leading axes. This is the only non-scalar broadcast
    in the library.
    """
    nd_x, nd_b = x.data.ndim, b.data.ndim
    if nd_x < nd_b or x.shape[nd_x - nd_b:] != b.shape:
        raise ShapeError(f"bias_add: {b.shape} is not a suffix of {x.shape}")
    out = x.data + b.data
    _count("adds", out.size)
    lead = tuple(range(nd_x - nd_b))

    def backward(g):
        return (g, np.sum(g, axis=lead) if lead else g)

    return apply_op("bias_add", (x, b), out, backward)


# ---------------------------------------------------------------------------
# matrix products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    out = a.data @ b.data
    _count("macs", a.shape[0] * a.shape[1] * b.shape[1])

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return apply_op("matmul", (a, b), out, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [B,M,K] @ [B,K,N] -> [B,M,N]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: expected 3-D operands, got {a.shape} x {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data
    _count("macs", a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])

    def backward(g):
        return (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g)

    return apply_op("bmm", (a, b), out, backward)


# ---------------------------------------------------------------------------
# convolutions (cross-correlation); stride for conv2d, groups for conv3d

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           padding=0, stride=1) -> Tensor:
    """2-D cross-correlation over [C,H,W] or [B,C,H,W] with kernel
    [C_out,C_in,kh,kw]. Output height is (H + 2p - kh)//stride + 1."""
    ph, pw = _pair(padding)
    sh, sw = _pair(stride)
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {w.shape}")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    B, C, H, W = xb.shape
    Cout, Cin, kh, kw = w.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {Cin}")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(Cout, -1)
    out_mat = cols @ wmat.T
    _count("macs", B * Ho * Wo * C * kh * kw * Cout)
    out = out_mat.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
        out = out + bias.data[None, :, None, None]
        _count("adds", out.size)
    if not batched:
        out = out[0]

    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(
            B * Ho * Wo, Cout)
        dw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(
            0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u:u + Ho * sh:sh, v:v + Wo * sw:sw] += dcols[..., u, v]
        dx = dxp[:, :, ph:ph + H, pw:pw + W]
        if not batched:
            dx = dx[0]
        if bias is None:
            return (dx, dw)
        return (dx, dw, gb.sum(axis=(0, 2, 3)))

    return apply_op("conv2d", inputs, out, backward)


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           padding=0, groups: int = 1) -> Tensor:
    """3-D cross-correlation over [C,S,H,W] or [B,C,S,H,W] volumes with
    kernel [C_out, C_in/groups, ks, kh, kw] and per-axis padding."""
    ps, ph, pw = _triple(padding)
    if w.data.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be 5-D, got {w.shape}")
    if x.data.ndim not in (4, 5):
        raise ShapeError(f"conv3d: input must be 4-D or 5-D, got {x.shape}")
    batched = x.data.ndim == 5
    xb = x.data if batched else x.data[None]
    B, C, S, H, W = xb.shape
    Cout, Cg, ks, kh, kw = w.shape
    if groups < 1 or C % groups or Cout % groups:
        raise ShapeError(f"conv3d: groups={groups} does not divide channels "
                         f"({C} in, {Cout} out)")
    if Cg != C // groups:
        raise ShapeError(
            f"conv3d: kernel group width {Cg} != in_channels/groups {C // groups}")
    Sp, Hp, Wp = S + 2 * ps, H + 2 * ph, W + 2 * pw
    if ks > Sp or kh > Hp or kw > Wp:
        raise ShapeError(
            f"conv3d: kernel {ks}x{kh}x{kw} larger than padded input "
            f"{Sp}x{Hp}x{Wp}")
    So, Ho, Wo = Sp - ks + 1, Hp - kh + 1, Wp - kw + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (ps, ps), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (ks, kh, kw), axis=(2, 3, 4))
    # fold into per-group GEMMs: [G, B*So*Ho*Wo, (C/G)*ks*kh*kw]
    win6 = win.reshape(B, groups, Cg, So, Ho, Wo, ks, kh, kw)
    cols = np.ascontiguousarray(win6.transpose(1, 0, 3, 4, 5, 2, 6, 7, 8)).reshape(
        groups, B * So * Ho * Wo, Cg * ks * kh * kw)
    wg = w.data.reshape(groups, Cout // groups, Cg * ks * kh * kw)
    out_g = cols @ wg.transpose(0, 2, 1)
    _count("macs", groups * (B * So * Ho * Wo) * (Cg * ks * kh * kw) * (Cout // groups))
    out = out_g.reshape(groups, B, So, Ho, Wo, Cout // groups).transpose(
        1, 0, 5, 2, 3, 4).reshape(B, Cout, So, Ho, Wo)
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"conv3d: bias shape {bias.shape} != ({Cout},)")
        out = out + bias.data[None, :, None, None, None]
        _count("adds", out.size)
    if not batched:
        out = out[0]

    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(
            gb.reshape(B, groups, Cout // groups, So, Ho, Wo).transpose(
                1, 0, 3, 4, 5, 2)).reshape(groups, B * So * Ho * Wo, Cout // groups)
        dw = (gmat.transpose(0, 2, 1) @ cols).reshape(w.shape)
        dwin = (gmat @ wg).reshape(groups, B, So, Ho, Wo, Cg, ks, kh, kw)
        dwin = dwin.transpose(1, 0, 5, 2, 3, 4, 6, 7, 8).reshape(
            B, C, So, Ho, Wo, ks, kh, kw)
        dxp = np.zeros_like(xp)
        for t in range(ks):
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, t:t + So, u:u + Ho, v:v + Wo] += dwin[..., t, u, v]
        dx = dxp[:, :, ps:ps + S, ph:ph + H, pw:pw + W]
        if not batched:
            dx = dx[0]
        if bias is None:
            return (dx, dw)
        return (dx, dw, gb.sum(axis=(0, 2, 3, 4)))

    return apply_op("conv3d", inputs, out, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return apply_op("relu", (x,), out, lambda g: (g * (x.data > 0.0),))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return apply_op("log", (x,), out, lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; clamped entries pass no gradient."""
    out = np.maximum(x.data, floor)
    return apply_op("clamp_min", (x,), out, lambda g: (g * (x.data > floor),))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic along ``axis``, computed with max-subtraction.

    ``mask`` is an optional boolean array (broadcastable to ``x``); True
    lanes are excluded: they get exactly zero probability and pass no
    gradient, which is what makes causal attention bit-exactly causal.
    """
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data
    if mask is not None:
        z = np.where(np.broadcast_to(np.asarray(mask, dtype=bool), z.shape),
                     -np.inf, z)
    with np.errstate(invalid="ignore"):
        e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        tmp = g * s
        return (tmp - s * np.sum(tmp, axis=axis, keepdims=True),)

    return apply_op("softmax", (x,), s, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return apply_op("log_softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({dim},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    iv = 1.0 / np.sqrt(var + eps)
    xh = xc * iv
    out = xh * gamma.data + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        dgamma = np.sum(g * xh, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxh = g * gamma.data
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = np.mean(dxh * xh, axis=-1, keepdims=True)
        return (iv * (dxh - m1 - xh * m2), dgamma, dbeta)

    return apply_op("layer_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# reductions and shape surgery

def _normalize_axes(axes, ndim: int, op: str) -> tuple:
    if axes is None:
        axes = tuple(range(ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"{op}: axis {a} invalid for {ndim}-D input")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"{op}: duplicate axes {axes}")
    return tuple(sorted(norm))


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim, "reduce_sum")
    if not axes:
        return apply_op("reduce_sum", (x,), x.data.copy(), lambda g: (g,))
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError(f"reduce_sum: empty reduction over axes {axes} of {x.shape}")
    out = np.sum(x.data, axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape),)

    return apply_op("reduce_sum", (x,), out, backward)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    """Arithmetic mean over the named axes; () is the identity."""
    axes = _normalize_axes(axes, x.data.ndim, "reduce_mean")
    if not axes:
        return apply_op("reduce_mean", (x,), x.data.copy(), lambda g: (g,))
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"reduce_mean: empty reduction over axes {axes} of {x.shape}")
    out = np.sum(x.data, axis=axes) / count

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return apply_op("reduce_mean", (x,), out, backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} invalid for {ndim}-D input")
    axis %= ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(
                other[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError(
                f"concat: non-axis extents differ, {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(tensors), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return apply_op("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"slice_axis: axis {axis} invalid for {x.shape}")
    axis %= ndim
    extent = x.shape[axis]
    if not 0 <= start < stop <= extent:
        raise ShapeError(
            f"slice_axis: [{start}:{stop}) invalid for extent {extent}")
    idx = tuple(slice(start, stop) if i == axis else slice(None)
                for i in range(ndim))
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return apply_op("slice_axis", (x,), out, backward)


def gather_rows(p: Tensor, labels) -> Tensor:
    """out[t] = p[t, labels[t]] for a [T, C] tensor and integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if p.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != p.shape[0]:
        raise ShapeError(
            f"gather_rows: need [T,C] and labels [T], got {p.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise ShapeError(f"gather_rows: labels outside [0, {p.shape[1]})")
    rows = np.arange(p.shape[0])
    out = p.data[rows, labels]

    def backward(g):
        full = np.zeros_like(p.data)
        full[rows, labels] = g
        return (full,)

    return apply_op("gather_rows", (p,), out, backward)


def detach(x: Tensor) -> Tensor:
    """Value-equal tensor through which no gradient flows."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward sweep and the optimizer step

def backward(loss: Tensor) -> None:
    """Populate d(loss)/d(leaf) for every grad-enabled leaf on the tape.

    Repeated calls without zeroing accumulate. The loss must be scalar and
    must have been produced while a tape was active.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("backward: loss was not produced under an active tape")
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t._requires:
                continue
            if t.grad_enabled:
                t.grad += gi
            elif t.node is not None:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


def sgd_step(params, lr: float) -> None:
    """In-place p <- p - lr * grad for every parameter, then zero the grads."""
    tensors = params.values() if hasattr(params, "values") else list(params)
    for p in tensors:
        if not p.grad_enabled or p.grad is None:
            raise ValueError("sgd_step: parameter without gradient storage")
        p.data -= lr * p.grad
        if not np.all(np.isfinite(p.data)):
            raise NumericsError("sgd_step: parameter update produced non-finite values")
        p.grad[...] = 0.0
