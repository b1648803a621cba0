"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Graph` is active are recorded on that
graph whenever one of their inputs is tracked (a leaf that requires grad, or
the output of an earlier recorded operation). ``Graph.backward`` replays the
tape in reverse and accumulates gradients into the tracked leaves.

Outside an active graph nothing is recorded, which makes plain inference
cheap::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Graph() as g:
        loss = (Tensor(x) @ w).sum()
    g.backward(loss)
    w.grad  # dloss/dw

Storage is 32-bit by default. Passing ``dtype=np.float64`` keeps a tensor in
double precision and every op preserves the dtype of its inputs, which is what
the finite-difference checks in the test-suite rely on.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, GraphError, ParameterError

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "current_graph",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "stack",
    "softmax",
    "layer_norm",
    "softmax_cross_entropy",
    "conv1d_dilated_causal",
]

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def current_graph() -> Optional["Graph"]:
    """The innermost active graph of the calling thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


@dataclass(eq=False)
class _Entry:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable
    needs: tuple


class Graph:
    """A tape of recorded operations.

    ``wrt`` restricts differentiation to the given tensors; other leaves are
    treated as constants even if they carry ``requires_grad``. A graph can be
    replayed once. Gradients are *added* to ``leaf.grad`` so several graphs
    may contribute to one update; call :meth:`Tensor.zero_grad` (or
    ``zero_grad`` on the optimizer) to reset.
    """

    def __init__(self, wrt: Iterable[Tensor] | None = None):
        self.entries: list[_Entry] = []
        self._tracked: set[int] = set()
        self._leaves: list[Tensor] = []
        self._outputs: set[int] = set()
        self._wrt = None
        if wrt is not None:
            self._wrt = {id(t) for t in wrt}
            self._wrt_refs = list(wrt)
        self._consumed = False

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph exited out of order")
        stack.pop()

    def _is_tracked(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        key = id(t)
        if key in self._tracked:
            return True
        leaf = key in self._wrt if self._wrt is not None else t.requires_grad
        if leaf:
            self._tracked.add(key)
            self._leaves.append(t)
        return leaf

    def _record(self, kind: str, inputs: tuple, output: Tensor, fn: Callable) -> None:
        if self._consumed:
            raise GraphError("cannot record on a graph that was already replayed")
        needs = tuple(self._is_tracked(t) for t in inputs)
        if not any(needs):
            return
        self.entries.append(_Entry(kind, inputs, output, fn, needs))
        self._tracked.add(id(output))
        self._outputs.add(id(output))

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def backward(self, loss: Tensor) -> None:
        """Accumulate dloss/dleaf into every tracked leaf's ``grad``."""
        if self._consumed:
            raise GraphError("graph already replayed; record a new graph for another backward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
        if id(loss) not in self._outputs:
            raise ContractError("loss is not reachable from any tracked leaf")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.backward(g, entry.needs)
            for inp, need, ig in zip(entry.inputs, entry.needs, in_grads):
                if not need or ig is None:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None or id(leaf) in self._outputs:
                continue
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.entries.clear()


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _as_operand(x, like: np.ndarray) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(like.dtype)
    return arr


def _operands(a, b, ad, bd):
    if ad is None and bd is None:
        raise ParameterError("at least one operand must be a Tensor")
    ad = ad if ad is not None else _as_operand(a, bd)
    bd = bd if bd is not None else _as_operand(b, ad)
    return ad, bd


def _emit(kind: str, out: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    t = Tensor._wrap(out)
    g = current_graph()
    if g is not None:
        g._record(kind, inputs, t, fn)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    ad = a.data if isinstance(a, Tensor) else None
    bd = b.data if isinstance(b, Tensor) else None
    ad, bd = _operands(a, b, ad, bd)
    _broadcast_shape(ad, bd)
    sa, sb = np.shape(ad), np.shape(bd)

    def back(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return _emit("add", ad + bd, (a, b), back)


def sub(a, b) -> Tensor:
    ad = a.data if isinstance(a, Tensor) else None
    bd = b.data if isinstance(b, Tensor) else None
    ad, bd = _operands(a, b, ad, bd)
    _broadcast_shape(ad, bd)
    sa, sb = np.shape(ad), np.shape(bd)

    def back(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)

    return _emit("sub", ad - bd, (a, b), back)


def mul(a, b) -> Tensor:
    ad = a.data if isinstance(a, Tensor) else None
    bd = b.data if isinstance(b, Tensor) else None
    ad, bd = _operands(a, b, ad, bd)
    _broadcast_shape(ad, bd)

    def back(g, needs):
        ga = _unbroadcast(g * bd, np.shape(ad)) if needs[0] else None
        gb = _unbroadcast(g * ad, np.shape(bd)) if needs[1] else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    ad = a.data if isinstance(a, Tensor) else None
    bd = b.data if isinstance(b, Tensor) else None
    ad, bd = _operands(a, b, ad, bd)
    _broadcast_shape(ad, bd)
    out = ad / bd

    def back(g, needs):
        ga = _unbroadcast(g / bd, np.shape(ad)) if needs[0] else None
        gb = _unbroadcast(-g * out / bd, np.shape(bd)) if needs[1] else None
        return ga, gb

    return _emit("div", out, (a, b), back)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g, needs: (-g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g, needs: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows and gives exactly 0.5 at 0
    y = 0.5 * (np.tanh(0.5 * x.data) + 1)
    return _emit("sigmoid", y, (x,), lambda g, needs: (g * y * (1 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0).astype(x.data.dtype, copy=False)
    return _emit("relu", y, (x,), lambda g, needs: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g, needs: (g * y,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(x, fn: str, y=None) -> Tensor:
    """Apply a named elementwise function (``add``, ``mul``, ``tanh`` ...)."""
    if fn in _BINARY:
        if y is None:
            raise ParameterError(f"{fn} needs a second operand")
        return _BINARY[fn](x, y)
    if fn in _UNARY:
        return _UNARY[fn](x)
    raise ParameterError(f"unknown elementwise function {fn!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    ad, bd = _data(a), _data(b)
    ad = np.asarray(ad)
    bd = np.asarray(bd)
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs operands with at least 2 dims, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def back(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if needs[1]:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), back)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with 64-bit accumulation; result stored in the input's dtype."""
    xd = x.data
    out = np.sum(xd, axis=axis, dtype=np.float64, keepdims=keepdims).astype(xd.dtype)
    axes = _norm_axis(axis, xd.ndim)
    shape = xd.shape

    def back(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    axes = _norm_axis(axis, xd.ndim)
    count = int(np.prod([xd.shape[a] for a in axes])) if axes else 1
    out = (np.sum(xd, axis=axis, dtype=np.float64, keepdims=keepdims) / count).astype(xd.dtype)
    shape = xd.shape

    def back(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(xd.dtype),)

    return _emit("mean", out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g, needs: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    xd = x.data
    out = xd[idx]
    basic = _is_basic_index(idx)

    def back(g, needs):
        z = np.zeros_like(xd)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _emit("getitem", out, (x,), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    try:
        out = np.stack(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def back(g, needs):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if need else None for i, need in enumerate(needs))

    return _emit("stack", out, tuple(tensors), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g, needs):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = _data(gamma), _data(beta)
    out = xhat * gd + bd
    n = xd.shape[-1]

    def back(g, needs):
        gx = ggam = gbet = None
        if needs[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggam = (g * xhat).reshape(-1, n).sum(axis=0)
        if needs[2]:
            gbet = g.reshape(-1, n).sum(axis=0)
        return gx, ggam, gbet

    return _emit("layer_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]``.

    ``logits`` is ``[C]`` with an int target, or ``[B, C]`` with ``B`` targets.
    """
    ld = logits.data
    single = ld.ndim == 1
    z = ld[None, :] if single else ld
    if z.ndim != 2:
        raise DimensionError(f"logits must be [C] or [B, C], got {ld.shape}")
    b, c = z.shape
    if c < 2:
        raise DimensionError("softmax_cross_entropy needs at least 2 classes")
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if tgt.shape != (b,):
        raise DimensionError(f"expected {b} targets, got shape {tgt.shape}")
    if np.any(tgt < 0) or np.any(tgt >= c):
        raise IndexError(f"target class out of range [0, {c})")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(lse - shifted[rows, tgt]))
    probs = np.exp(shifted - lse[:, None])

    def back(g, needs):
        d = probs.copy()
        d[rows, tgt] -= 1.0
        d *= float(g.reshape(-1)[0]) / b
        d = d.astype(ld.dtype)
        return (d[0] if single else d,)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=ld.dtype), (logits,), back)


def conv1d_dilated_causal(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated 1-D convolution (cross-correlation, zero left padding).

    ``x`` is ``[C_in, T]`` or ``[B, C_in, T]``; ``w`` is ``[C_out, C_in, K]``.
    Output time ``t`` only sees inputs at ``t, t - d, ..., t - (K-1) d``.
    """
    if int(dilation) != dilation or dilation < 1:
        raise ParameterError(f"dilation must be a positive integer, got {dilation}")
    dilation = int(dilation)
    xd, wd = _data(x), _data(w)
    single = xd.ndim == 2
    xb = xd[None] if single else xd
    if xb.ndim != 3 or wd.ndim != 3:
        raise DimensionError(f"expected x [B, C_in, T] and w [C_out, C_in, K], got {xd.shape} and {wd.shape}")
    bsz, c_in, steps = xb.shape
    c_out, w_in, k = wd.shape
    if w_in != c_in:
        raise DimensionError(f"kernel expects {w_in} input channels, input has {c_in}")
    if k < 1:
        raise ParameterError("kernel size must be at least 1")
    pad = (k - 1) * dilation
    # channel-last copy so every im2col slice is contiguous
    xt = np.zeros((bsz, steps + pad, c_in), dtype=xb.dtype)
    xt[:, pad:] = xb.transpose(0, 2, 1)
    # cols[b, t, j, c] = x_padded[b, c, t + j*d]
    cols = np.empty((bsz, steps, k, c_in), dtype=xb.dtype)
    for j in range(k):
        cols[:, :, j] = xt[:, j * dilation : j * dilation + steps]
    cols2 = cols.reshape(bsz * steps, k * c_in)
    w2 = np.ascontiguousarray(wd.transpose(0, 2, 1)).reshape(c_out, k * c_in)
    out = np.ascontiguousarray((cols2 @ w2.T).reshape(bsz, steps, c_out).transpose(0, 2, 1))

    def back(g, needs):
        gb = g[None] if single else g
        g2 = np.ascontiguousarray(gb.transpose(0, 2, 1)).reshape(bsz * steps, c_out)
        gx = gw = None
        if needs[0]:
            gcols = (g2 @ w2).reshape(bsz, steps, k, c_in)
            gxt = np.zeros((bsz, steps + pad, c_in), dtype=xb.dtype)
            for j in range(k):
                gxt[:, j * dilation : j * dilation + steps] += gcols[:, :, j]
            gx = np.ascontiguousarray(gxt[:, pad:].transpose(0, 2, 1))
            gx = gx[0] if single else gx
        if needs[1]:
            gw = (g2.T @ cols2).reshape(c_out, k, c_in).transpose(0, 2, 1)
        return gx, gw

    return _emit("conv1d", out[0] if single else out, (x, w), back)
