"""Dense n-dimensional tensors with a minimal reverse-mode gradient tape.

Only the operations the model actually uses are implemented, and binary
broadcasting is restricted to the explicit patterns they need (bias rows,
the [b,l,d] x [d,n] expansion, the [b,l,d] x [b,l,n] outer product).
Everything is double precision by default; float32 is opt-in by building
parameters and data in that dtype.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Tensor dimensions do not line up; the message names the offending axes."""


class UsageError(RuntimeError):
    """An operation was called in a way the tape cannot support."""


class ValidationError(ValueError):
    """Input values violate a documented precondition."""


# ---------------------------------------------------------------------------
# FLOP accounting
#
# Convention (also emitted in run metadata): one multiply-add = 2 FLOPs.
# Only the documented buckets are counted: matmul-like projections
# (m*k*n mul-adds), the depthwise convolution (b*l*d*k), discretization
# (1 mul-add per (d,n) lane per token), the scan recurrence + readout
# (2 per lane per token), and the output gate (y+u)*SiLU(z) (1 per channel
# per token, the add riding along as the add half of the multiply-add).
# Embedding lookups, normalization, activations and loss arithmetic are free.
# ---------------------------------------------------------------------------


class FlopMeter:
    """Tallies documented multiply-adds during a forward pass."""

    def __init__(self) -> None:
        self.by_bucket: dict[str, int] = {}

    def add(self, bucket: str, mul_adds: int) -> None:
        self.by_bucket[bucket] = self.by_bucket.get(bucket, 0) + int(mul_adds)

    @property
    def mul_adds(self) -> int:
        return sum(self.by_bucket.values())

    @property
    def flops(self) -> int:
        return 2 * self.mul_adds


_ACTIVE_METER: Optional[FlopMeter] = None


@contextmanager
def count_flops() -> Iterator[FlopMeter]:
    """Context manager that turns on multiply-add tallying."""
    global _ACTIVE_METER
    prev, _ACTIVE_METER = _ACTIVE_METER, FlopMeter()
    try:
        yield _ACTIVE_METER
    finally:
        _ACTIVE_METER = prev


def meter_add(bucket: str, mul_adds: int) -> None:
    if _ACTIVE_METER is not None:
        _ACTIVE_METER.add(bucket, mul_adds)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_ids = itertools.count()


class Tensor:
    """Immutable dense array, optionally tracked on a GradientTape."""

    __slots__ = ("data", "tape", "tid")

    def __init__(self, data: ArrayLike, tape: "GradientTape | None" = None,
                 dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = tape
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy_data(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, tracked={self.tape is not None})"


class _Node:
    __slots__ = ("out_tid", "in_tids", "vjp")

    def __init__(self, out_tid: int, in_tids: tuple, vjp: Callable) -> None:
        self.out_tid = out_tid
        self.in_tids = in_tids
        self.vjp = vjp


class GradientTape:
    """Ordered record of operations; single-writer, one training step each.

    Forward activations needed by the backward pass are captured in the
    node closures, so backward never recomputes.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.watched: list[Tensor] = []
        self.gradients: dict[int, np.ndarray] = {}

    def watch(self, t: Tensor) -> Tensor:
        """Mark `t` as a tracked leaf; backward will report its gradient.

        A leaf may be re-watched on a later tape (the parameter-update
        pattern); operation results stay bound to the tape that made them.
        """
        t.tape = self
        self.watched.append(t)
        return t

    def grad(self, t: Tensor) -> np.ndarray:
        try:
            return self.gradients[t.tid]
        except KeyError:
            raise UsageError("no gradient recorded; run backward() and watch() the leaf first") from None


def _tape_of(inputs: Sequence[Tensor]) -> Optional[GradientTape]:
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise UsageError("operation mixes tensors from two different tapes")
    return tape


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create the output tensor, recording a node when any input is tracked.

    `vjp(grad_out)` must return one gradient array (or None) per input, in
    order. Modules outside this file use `record` to define their own ops.
    """
    tape = _tape_of(inputs)
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        in_tids = tuple(
            t.tid if isinstance(t, Tensor) and t.tape is tape else None
            for t in inputs
        )
        tape.nodes.append(_Node(out.tid, in_tids, vjp))
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate adjoints in reverse topological order; seeds d(loss)/d(loss)=1.

    Afterwards every watched leaf has a gradient of its own shape in
    `tape.gradients` (zeros if the loss does not depend on it).
    """
    if loss.tape is not tape:
        raise UsageError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(node.out_tid, None)
        if g_out is None:
            continue
        g_ins = node.vjp(g_out)
        for tid, g in zip(node.in_tids, g_ins):
            if tid is None or g is None:
                continue
            acc = grads.get(tid)
            grads[tid] = g if acc is None else acc + g

    tape.gradients = {}
    for leaf in tape.watched:
        g = grads.get(leaf.tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        if g.shape != leaf.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != leaf shape {leaf.data.shape}")
        tape.gradients[leaf.tid] = g
    return tape.gradients


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it
    z = np.exp(-np.abs(x))
    denom = 1.0 + z
    return np.where(x >= 0, 1.0 / denom, z / denom)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    x = a.data
    return record(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def _softplus(x: np.ndarray) -> np.ndarray:
    # Overflow-safe: above +30 use x + log1p(exp(-x)); below that the direct
    # log1p(exp(x)) cannot overflow (exp(30) ~ 1e13) and underflows gracefully.
    big = x > 30.0
    safe = np.log1p(np.exp(np.where(big, -x, x)))
    return np.asarray(np.where(big, x + safe, safe))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) with overflow-safe branches for large |x|."""
    s = _sigmoid(a.data)
    return record(_softplus(a.data), (a,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record(np.asarray(a.data.mean()), (a,),
                  lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           flop_bucket: str = "linear") -> Tensor:
    """y[..., j] = sum_k x[..., k] * w[k, j] + bias[j], over 2-d or 3-d x."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"linear: x must be 2-d or 3-d, got shape {x.shape}")
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"linear: inner axes disagree, x last axis {x.shape[-1]} vs w first axis {w.shape[0] if w.ndim == 2 else w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: bias shape {bias.shape} != output axis ({w.shape[1]},)")

    lead = x.shape[:-1]
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    y2 = x2 @ w.data
    if bias is not None:
        y2 = y2 + bias.data
    meter_add(flop_bucket, x2.shape[0] * k * n)

    wd = w.data

    def vjp(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(x.data.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    out = y2.reshape(*lead, n)
    if bias is None:
        return record(out, inputs, lambda g: vjp(g)[:2])
    return record(out, inputs, vjp)


def conv1d_causal_depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal convolution with zero left-padding of length k-1.

    y[i,t,c] = sum_j kernel[c,j] * x[i, t-k+1+j, c], out-of-range x read as 0.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: x must be [b,l,d], got {x.shape}")
    if kernel.ndim != 2:
        raise ShapeError(f"conv1d: kernel must be [d,k], got {kernel.shape}")
    b, l, d = x.shape
    dk, k = kernel.shape
    if k < 1:
        raise ValidationError(f"conv1d: kernel width must be >= 1, got {k}")
    if dk != d:
        raise ShapeError(f"conv1d: channel axes disagree, x has {d}, kernel has {dk}")

    kd = kernel.data
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    y = np.zeros_like(x.data)
    for j in range(k):
        y += kd[:, j] * xp[:, j:j + l, :]
    meter_add("conv", b * l * d * k)

    def vjp(g):
        gp = np.pad(g, ((0, 0), (0, k - 1), (0, 0)))
        gx = np.zeros_like(x.data)
        gk = np.empty_like(kd)
        for j in range(k):
            gx += kd[:, j] * gp[:, k - 1 - j:k - 1 - j + l, :]
            gk[:, j] = np.einsum("btc,btc->c", xp[:, j:j + l, :], g)
        return (gx, gk)

    return record(y, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# The two broadcast patterns of the discretization step
# ---------------------------------------------------------------------------


def bcast_mul_dn(delta: Tensor, a: Tensor) -> Tensor:
    """[b,l,d] x [d,n] -> [b,l,d,n]: delta unsqueezed over n, a over (b,l)."""
    if delta.ndim != 3 or a.ndim != 2 or delta.shape[2] != a.shape[0]:
        raise ShapeError(
            f"bcast_mul_dn: need [b,l,d] x [d,n] with matching d, got {delta.shape} x {a.shape}")
    dd, ad = delta.data, a.data
    out = dd[..., None] * ad

    def vjp(g):
        return (np.einsum("blds,ds->bld", g, ad),
                np.einsum("blds,bld->ds", g, dd))

    return record(out, (delta, a), vjp)


def outer_bl(u: Tensor, b: Tensor) -> Tensor:
    """[b,l,d] x [b,l,n] -> [b,l,d,n] batched outer product."""
    if u.ndim != 3 or b.ndim != 3 or u.shape[:2] != b.shape[:2]:
        raise ShapeError(
            f"outer_bl: need [b,l,d] x [b,l,n] with matching (b,l), got {u.shape} x {b.shape}")
    ud, bd = u.data, b.data
    out = ud[..., None] * bd[:, :, None, :]

    def vjp(g):
        return (np.einsum("blds,bls->bld", g, bd),
                np.einsum("blds,bld->bls", g, ud))

    return record(out, (u, b), vjp)


def mul_dn(delta: Tensor, x: Tensor) -> Tensor:
    """[b,l,d] x [b,l,d,n] -> [b,l,d,n]: delta repeated along the state axis."""
    if delta.ndim != 3 or x.ndim != 4 or delta.shape != x.shape[:3]:
        raise ShapeError(
            f"mul_dn: need [b,l,d] x [b,l,d,n], got {delta.shape} x {x.shape}")
    dd, xd = delta.data, x.data
    out = dd[..., None] * xd

    def vjp(g):
        return (np.einsum("blds,blds->bld", g, xd), g * dd[..., None])

    return record(out, (delta, x), vjp)


# ---------------------------------------------------------------------------
# Indexing / assembly
# ---------------------------------------------------------------------------


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis (used to split fused projections)."""
    f = x.shape[-1]
    if not (0 <= start < stop <= f):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for axis of size {f}")
    out = np.ascontiguousarray(x.data[..., start:stop])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return record(out, (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} has {x.size} elements, target {shape}")
    old = x.data.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a [N,f] tensor."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows: x must be [N,f], got {x.shape}")
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), vjp)


def scatter_rows(piece: Tensor, idx: np.ndarray, total_rows: int) -> Tensor:
    """Place rows of `piece` at positions `idx` of an otherwise-zero [total,f]."""
    if piece.ndim != 2 or len(idx) != piece.shape[0]:
        raise ShapeError(
            f"scatter_rows: piece {piece.shape} vs {len(idx)} indices")
    out = np.zeros((total_rows, piece.shape[1]), dtype=piece.dtype)
    out[idx] = piece.data
    return record(out, (piece,), lambda g: (g[idx],))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradient scatter-adds into the table. Lookups cost no FLOPs."""
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be [V,f], got {table.shape}")
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record(out, (table,), vjp)


# ---------------------------------------------------------------------------
# Normalization and losses
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / rms(x, last axis) * gain."""
    f = x.shape[-1]
    if gain.shape != (f,):
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} != ({f},)")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def vjp(g):
        gg = g * gd
        # d/dx of x*r: r*I - x * x^T * r^3 / f
        dot = (gg * xd).sum(axis=-1, keepdims=True)
        gx = r * gg - xd * (r ** 3) * dot / f
        ggain = (g * xhat).reshape(-1, f).sum(axis=0)
        return (gx, ggain)

    return record(xhat * gd, (x, gain), vjp)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean NLL of integer targets under log-softmax of logits [N,V]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_mean: logits must be [N,V], got {logits.shape}")
    targets = np.asarray(targets)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy_mean: {n} rows vs {targets.shape} targets")
    if n == 0:
        raise ValidationError("cross_entropy_mean: empty batch")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    z = np.exp(ld - m)
    denom = z.sum(axis=1, keepdims=True)
    log_probs = (ld - m) - np.log(denom)
    nll = -log_probs[np.arange(n), targets]

    def vjp(g):
        p = z / denom
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return record(np.asarray(nll.mean()), (logits,), vjp)


def mse_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean of (pred - target)^2; target is a constant."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_mean: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target
    n = diff.size

    def vjp(g):
        return (diff * (2.0 * g / n),)

    return record(np.asarray((diff * diff).mean()), (pred,), vjp)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of `f` and central differences.

    `f` takes one Tensor per entry of `inputs` and must return a scalar.
    Relative error is |analytic - numeric| / (|analytic| + |numeric| + 1e-12),
    maximized over every entry of every input.
    """
    if eps <= 0:
        raise ValidationError(f"grad_check: eps must be positive, got {eps}")
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    tape = GradientTape()
    tracked = [tape.watch(Tensor(a.copy())) for a in arrays]
    out = f(*tracked)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise UsageError("grad_check: f must return a scalar Tensor")
    backward(tape, out)
    analytic = [tape.grad(t) for t in tracked]

    def eval_plain(arrs):
        return f(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        g_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = eval_plain(arrays)
            flat[j] = orig - eps
            lo = eval_plain(arrays)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a_val = g_flat[j]
            err = abs(a_val - numeric) / (abs(a_val) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
