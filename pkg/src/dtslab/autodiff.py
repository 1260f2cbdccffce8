"""Minimal reverse-mode automatic differentiation on numpy float32 buffers.

The graph is built define-by-run: while a ``Tape`` is active (used as a
context manager), every op records one node holding its input tensors, its
output tensor, and a closure that maps the output gradient to input
gradients.  Because nodes are appended in execution order, the list is
already topologically sorted and ``backward`` just walks it in reverse.

With no tape active (or inside ``no_grad``) the same ops run forward-only
and allocate nothing besides the result, which is what teacher inference
and evaluation use.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "as_tensor",
    "add",
    "mul",
    "sum_all",
    "relu",
    "conv2d",
    "upsample_nearest",
    "softmax_channel",
    "weighted_cross_entropy",
    "backward",
]


class Tensor:
    """A float32 ndarray plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


# Stack of active recording contexts.  ``None`` entries are no_grad scopes.
_TAPE_STACK: list = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops; context manager activates recording."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GraphError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Context manager that suspends recording even inside an active tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _maybe_record(inputs: Sequence[Tensor], out_data: np.ndarray,
                  backward_fn: Callable) -> Tensor:
    """Wrap ``out_data``; record the node if a tape is active and useful."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _own(g: np.ndarray) -> np.ndarray:
    # Gradients may be accumulated in place later; never hand out views.
    return g if g.flags["OWNDATA"] else g.copy()


# ---------------------------------------------------------------------------
# Elementwise / reduction ops (small helpers, mostly for tests and probes)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        return g, g

    return _maybe_record((a, b), a.data + b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        return g * b.data, g * a.data

    return _maybe_record((a, b), a.data * b.data, bwd)


def sum_all(x) -> Tensor:
    """Sum every element down to a scalar."""
    x = as_tensor(x)
    shape = x.data.shape

    def bwd(g):
        return (np.broadcast_to(np.float32(g), shape).copy(),)

    return _maybe_record((x,), np.asarray(x.data.sum(), dtype=np.float32), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, np.float32(0.0))
    mask = x.data > 0  # gradient at exactly 0 is defined as 0

    def bwd(g):
        return (g * mask,)

    return _maybe_record((x,), out_data, bwd)


# ---------------------------------------------------------------------------
# Convolution via im2col + GEMM
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (C*k*k, N*ho*wo) column matrix."""
    n, c, _, _ = xp.shape
    cols = np.empty((c, k, k, n, ho, wo), dtype=np.float32)
    for i in range(k):
        hi = i + (ho - 1) * stride + 1
        for j in range(k):
            wj = j + (wo - 1) * stride + 1
            cols[:, i, j] = xp[:, :, i:hi:stride, j:wj:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add columns back to a padded-input-shaped gradient."""
    n, c, hp, wp = xp_shape
    dxp = np.zeros(xp_shape, dtype=np.float32)
    dc = dcols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        hi = i + (ho - 1) * stride + 1
        for j in range(k):
            wj = j + (wo - 1) * stride + 1
            dxp[:, :, i:hi:stride, j:wj:stride] += dc[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation.

    ``x`` is (C,H,W) or (N,C,H,W); ``weight`` is (Cout,Cin,k,k) with odd k;
    ``bias`` is (Cout,) or None.  Output spatial size follows the usual
    floor((H + 2*padding - k) / stride) + 1 rule.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None

    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise ShapeError(f"conv2d: weight must be (Cout,Cin,k,k), got {weight.data.shape}")
    k = weight.data.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")

    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (C,H,W) or (N,C,H,W), got {x.data.shape}")
    xb = x.data if batched else x.data[None]
    n, cin, h, w = xb.shape
    cout = weight.data.shape[0]
    if cin != weight.data.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {cin} do not match weight channels {weight.data.shape[1]}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias must be ({cout},), got {bias.data.shape}")

    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {k} with stride {stride}, padding {padding} does not fit "
            f"input {h}x{w}")

    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = w2 @ cols  # (Cout, N*ho*wo)
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def bwd(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        dw = (g2 @ cols.T).reshape(weight.data.shape)
        dcols = w2.T @ g2
        dxp = _col2im(dcols, xp_shape, k, stride, ho, wo)
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding].copy()
        else:
            dx = dxp
        if not batched:
            dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _maybe_record(inputs, out if batched else out[0], bwd)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing spatial axes."""
    x = as_tensor(x)
    if not isinstance(factor, int) or factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be a positive int, got {factor!r}")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"upsample_nearest: input must be 3D or 4D, got {x.data.shape}")
    out_data = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    in_shape = x.data.shape
    h, w = in_shape[-2], in_shape[-1]

    def bwd(g):
        lead = g.shape[:-2]
        gr = g.reshape(lead + (h, factor, w, factor))
        return (gr.sum(axis=(-3, -1)),)

    return _maybe_record((x,), out_data, bwd)


def softmax_channel(x) -> Tensor:
    """Softmax over the channel axis of (C,H,W) or (N,C,H,W) scores."""
    x = as_tensor(x)
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"softmax_channel: input must be 3D or 4D, got {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ShapeError("softmax_channel: input contains non-finite values")
    z = x.data - x.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-3, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=-3, keepdims=True)
        return (out_data * (g - inner),)

    return _maybe_record((x,), out_data, bwd)


def weighted_cross_entropy(logits, target, pixel_weight, ignore: int = 255) -> Tensor:
    """Per-pixel weighted cross entropy against integer class targets.

    ``logits`` is (C,H,W) or (N,C,H,W); ``target`` is integer (H,W) or
    (N,H,W) with class ids in [0, C) or ``ignore``; ``pixel_weight`` matches
    the target shape and must be non-negative.  Each sample reduces to the
    mean of ``weight * nll`` over its non-ignored pixels (0 if a sample is
    fully ignored), then samples are averaged into one scalar.
    """
    logits = as_tensor(logits)
    if logits.data.ndim not in (3, 4):
        raise ShapeError(f"weighted_cross_entropy: logits must be 3D or 4D, got {logits.data.shape}")
    batched = logits.data.ndim == 4
    lb = logits.data if batched else logits.data[None]
    n, c, h, w = lb.shape

    tb = np.asarray(target)
    if not np.issubdtype(tb.dtype, np.integer):
        raise ShapeError(f"weighted_cross_entropy: target must be integer, got dtype {tb.dtype}")
    tb = tb if batched else tb[None]
    wb = np.asarray(pixel_weight, dtype=np.float32)
    wb = wb if batched else wb[None]
    if tb.shape != (n, h, w) or wb.shape != (n, h, w):
        raise ShapeError(
            f"weighted_cross_entropy: target/weight shape must be {(n, h, w)}, "
            f"got {tb.shape} and {wb.shape}")
    if wb.size and wb.min() < 0:
        raise ShapeError("weighted_cross_entropy: pixel weights must be non-negative")
    valid = tb != ignore
    tc = np.where(valid, tb, 0)
    if tc.size and (tc.min() < 0 or tc.max() >= c):
        raise ShapeError(
            f"weighted_cross_entropy: target ids must lie in [0, {c}) or equal {ignore}")

    z = lb - lb.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse  # (N,C,H,W)
    tc4 = tc[:, None].astype(np.int64)
    nll = -np.take_along_axis(logp, tc4, axis=1)[:, 0]  # (N,H,W)

    counts = valid.sum(axis=(1, 2))
    counts_safe = np.maximum(counts, 1).astype(np.float32)
    contrib = np.where(valid, wb * nll, np.float32(0.0))
    per_sample = contrib.sum(axis=(1, 2)) / counts_safe
    loss = np.asarray(per_sample.mean(), dtype=np.float32)

    def bwd(g):
        # d loss / d logit = scale * (softmax - onehot), scale folding in the
        # pixel weight, the per-sample mean, and the batch mean.
        scale = np.where(valid, wb, np.float32(0.0)) / counts_safe[:, None, None]
        scale = scale * (np.float32(g) / np.float32(n))
        dl = np.exp(logp) * scale[:, None]
        at_t = np.take_along_axis(dl, tc4, axis=1) - scale[:, None]
        np.put_along_axis(dl, tc4, at_t, axis=1)
        return (dl if batched else dl[0],)

    return _maybe_record((logits,), loss, bwd)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape, accumulate: bool = False) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar produced on ``tape``.  Unless ``accumulate``
    is set, gradients of every tensor touching the tape are reset first.
    """
    if not isinstance(tape, Tape):
        raise GraphError("backward: second argument must be a Tape")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    outputs = {id(node.output) for node in tape.nodes}
    if id(loss) not in outputs:
        raise GraphError("backward: loss was not produced on this tape")

    # Intermediate (node output) grads never persist across passes; leaf
    # grads survive only when accumulating.
    for node in tape.nodes:
        node.output.grad = None
        if not accumulate:
            for t in node.inputs:
                t.grad = None

    loss.grad = np.ones((), dtype=np.float32)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        if len(grads) != len(node.inputs):  # pragma: no cover - op bug guard
            raise GraphError("backward: op returned wrong number of gradients")
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float32)
            if gi.shape != t.data.shape:  # pragma: no cover - op bug guard
                raise GraphError(
                    f"backward: gradient shape {gi.shape} does not match tensor {t.data.shape}")
            if t.grad is None:
                t.grad = _own(gi)
            else:
                t.grad = t.grad + gi
