"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable op records a node carrying its inputs, a backward rule
and a global sequence number. ``backward`` walks the reachable nodes in
descending sequence order, i.e. reverse execution order, visiting each once.
The tape is implicit and rebuilt on every forward pass (define-by-run).

Broadcasting is deliberately restricted: elementwise binary ops need equal
shapes, ``bias_add`` adds a vector over the last axis, and ``matmul`` may
share a 2-D right operand across a batch.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the op."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward", "op")

    def __init__(self, inputs, backward, op):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tensor:
    """Dense array with optional gradient tracking.

    Float arrays keep their dtype; anything else is converted to float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_pool(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward_fn, op)
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients are added to whatever is already stored; callers zero them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        g = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        _accumulate_leaf(loss, g)
        return

    order = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        order.append(t)
        stack.extend(i for i in node.inputs if i.requires_grad)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    pending = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        in_grads = t._node.backward(g)
        for inp, gi in zip(t._node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, gi)
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# -- elementwise binary -----------------------------------------------------

def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.broadcast_to(np.asarray(a, dtype=b.dtype), b.shape))
    if not isinstance(b, Tensor):
        b = Tensor(np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape))
    if a.shape != b.shape:
        raise ShapeError(f"elementwise op needs equal shapes, got {a.shape} and {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and np.isscalar(b):
        return scale(a, b)
    if isinstance(b, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` broadcast over every axis but the last."""
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"bias of shape {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "bias_add")


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` (..., n, d) by per-row factors ``s`` (..., n)."""
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"row factors of shape {s.shape} do not match {x.shape}")
    xd, sd = x.data, s.data[..., None]
    return _result(
        xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=-1)), "row_scale"
    )


# -- elementwise unary ------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    d = x.data
    return _result(np.log(d), (x,), lambda g: (g / d,), "log")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "permute"
    )


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    if len(xs) == 1:
        return xs[0]
    ndim = xs[0].ndim
    ax = axis % ndim
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(
                f"concat along axis {axis} needs matching shapes, got {[t.shape for t in xs]}"
            )
    offsets = np.cumsum([0] + [t.shape[ax] for t in xs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(xs))
        )

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of ``concat``: cut ``x`` into consecutive chunks along ``axis``."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(x, tuple(idx)))
        start += n
    return out


# -- reductions -------------------------------------------------------------

def _norm_axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    try:
        return tuple(sorted(a % x.ndim for a in axis)) if x.ndim else tuple(axis)
    except ZeroDivisionError:
        raise ShapeError("cannot reduce a 0-d tensor along an axis") from None


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(x, axis)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean_pool(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axis``; gradient spreads as 1/n per element."""
    axes = _norm_axes(x, axis)
    if axis is not None and len(axes) == 0:
        raise ShapeError("mean over an empty set of axes")
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over empty extent in shape {x.shape}")
    return scale(sum_(x, axes, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` must either share them or be a
    plain matrix applied to every batch element.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x (..., in), weight (out, in), bias (out,)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        res = [g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1])]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _result(out, inputs, bw, "linear")


# -- normalisation ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None, shift: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then apply ``gain``/``shift``."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = None if gain is None else gain.data
    y = xhat if gd is None else xhat * gd
    if shift is not None:
        y = y + shift.data
    lead = tuple(range(d.ndim - 1))
    inputs = tuple(t for t in (x, gain, shift) if t is not None)

    def bw(g):
        gx_hat = g if gd is None else g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        out = [gx]
        if gain is not None:
            out.append((g * xhat).sum(axis=lead))
        if shift is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _result(y.astype(d.dtype, copy=False), inputs, bw, "layer_norm")


# -- losses -----------------------------------------------------------------

def cross_entropy(
    logits: Tensor,
    targets: Iterable[int],
    reduction: str = "mean",
    ignore_label: int | None = None,
) -> Tensor:
    """Softmax cross-entropy over rows of ``logits`` (n, C).

    Rows whose target equals ``ignore_label`` contribute nothing and are left
    out of the mean's denominator. If every row is ignored the loss is 0.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, C) logits, got {logits.shape}")
    t = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"{t.shape[0] if t.ndim else 0} targets for {n} logit rows")
    keep = np.ones(n, dtype=bool) if ignore_label is None else t != ignore_label
    if np.any((t[keep] < 0) | (t[keep] >= c)):
        raise ValueError(f"target outside [0, {c})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    d = logits.data
    shifted = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(keep)[0]
    count = len(rows)
    total = -logp[rows, t[rows]].sum() if count else 0.0
    denom = count if (reduction == "mean" and count) else 1
    value = np.asarray(total / denom, dtype=d.dtype)

    def bw(g):
        grad = np.zeros_like(d)
        if count:
            p = np.exp(logp[rows])
            p[np.arange(count), t[rows]] -= 1.0
            grad[rows] = p * (g / denom)
        return (grad,)

    return _result(value, (logits,), bw, "cross_entropy")


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x (N, Cin, H, W), w (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # cols: (N, oh, ow, Cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # N, oh, ow, Cout
        gw = (gt.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        gcols = (gt @ wmat).reshape(n, oh, ow, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return _result(out, inputs, bw, "conv2d")
