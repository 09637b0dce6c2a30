"""Dense NHWC tensors with define-by-run reverse-mode differentiation.

Every op in this module returns a new :class:`Tensor`.  When gradient
recording is enabled and at least one operand requires a gradient, the
result keeps a reference to its operands together with a closure that maps
the output gradient to operand gradients.  :func:`backward` linearises that
record into a :class:`Graph` and walks it once in reverse.

Only the shapes the codec needs are supported: no general broadcasting,
layout fixed to batch x height x width x depth.
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

_local = threading.local()

#: Assert finiteness after every forward op.  Enabled with ``TILECODEC_DEBUG=1``.
DEBUG = os.environ.get("TILECODEC_DEBUG", "") not in ("", "0")


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors in this thread.

    The codec always runs in float32; float64 exists for gradient checking.
    """
    prev = get_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    """An n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = "leaf"
    return t


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = _wrap(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Graph:
    """Operations reachable from a root, in topological order.

    Every entry's operands appear earlier in :attr:`nodes` than the entry
    itself, so a single reverse sweep visits each op exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    x, y = a.data, b.data
    return _result(x * y, (a, b), lambda g: (g * y, g * x), "mul")


elementwise_add, elementwise_mul = add, mul


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector along the last axis."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias shape {bias.shape} does not match depth {x.shape[-1]}")
    axes = tuple(range(x.data.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)), "add_bias")


def tanh_act(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow, saturates to exactly 0 and 1
    half = x.dtype.type(0.5)
    return half * np.tanh(half * x) + half


def sigmoid_act(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = a.data.dtype.type(slope)
    k = np.where(a.data > 0, a.data.dtype.type(1), slope)
    return _result(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def straight_through(a: Tensor, values: np.ndarray) -> Tensor:
    """Forward ``values``, backward the identity (straight-through estimator)."""
    values = np.asarray(values, dtype=a.data.dtype)
    if values.shape != a.shape:
        raise ShapeError(f"straight_through: {values.shape} vs {a.shape}")
    return _result(values, (a,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    return _result(
        np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dtype = a.shape, a.data.dtype
    return _result(
        np.asarray(a.data.mean(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
        "mean",
    )


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    return mean(abs_(sub(a, b)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def split(a: Tensor, n: int) -> list[Tensor]:
    """Split the last axis into ``n`` equal contiguous parts."""
    depth = a.shape[-1]
    if depth % n:
        raise ShapeError(f"cannot split depth {depth} into {n} parts")
    w = depth // n
    outs = []
    for i in range(n):
        sl = slice(i * w, (i + 1) * w)

        def back(g, sl=sl):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[..., sl] = g
            return (full,)

        outs.append(_result(np.ascontiguousarray(a.data[..., sl]), (a,), back, "split"))
    return outs


# ---------------------------------------------------------------------------
# fused LSTM cell


def lstm_cell_state(gates: Tensor, cell: Tensor) -> Tensor:
    """sigmoid(f) * cell + sigmoid(i) * tanh(g) for gates stacked [i, f, o, g] on depth."""
    d = cell.shape[-1]
    if gates.shape[:-1] != cell.shape[:-1] or gates.shape[-1] != 4 * d:
        raise ShapeError(f"lstm: gates {gates.shape} incompatible with cell {cell.shape}")
    z = gates.data
    si = _sigmoid(z[..., :d])
    sf = _sigmoid(z[..., d : 2 * d])
    tg = np.tanh(z[..., 3 * d :])
    c_prev = cell.data
    out = sf * c_prev + si * tg

    def back(g):
        gz = np.zeros_like(z)
        gz[..., :d] = g * tg * si * (1 - si)
        gz[..., d : 2 * d] = g * c_prev * sf * (1 - sf)
        gz[..., 3 * d :] = g * si * (1 - tg * tg)
        return gz, g * sf

    return _result(out, (gates, cell), back, "lstm_cell_state")


def lstm_hidden(gates: Tensor, cell: Tensor) -> Tensor:
    """sigmoid(o) * tanh(cell) for gates stacked [i, f, o, g] on depth."""
    d = cell.shape[-1]
    if gates.shape[:-1] != cell.shape[:-1] or gates.shape[-1] != 4 * d:
        raise ShapeError(f"lstm: gates {gates.shape} incompatible with cell {cell.shape}")
    z = gates.data
    so = _sigmoid(z[..., 2 * d : 3 * d])
    tc = np.tanh(cell.data)

    def back(g):
        gz = np.zeros_like(z)
        gz[..., 2 * d : 3 * d] = g * tc * so * (1 - so)
        return gz, g * so * (1 - tc * tc)

    return _result(so * tc, (gates, cell), back, "lstm_hidden")


# ---------------------------------------------------------------------------
# convolutions


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output extent and (before, after) zero padding for "same" convolution.

    The odd pixel of padding goes after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected batch x height x width x depth input, got shape {x.shape}")


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    sb, sh, sw, sc = xp.strides
    b, c = xp.shape[0], xp.shape[3]
    return as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def _conv_core(x: np.ndarray, w: np.ndarray, stride: int):
    """Same-padded correlation; returns output plus what backward needs."""
    b, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    ho, pt, pb = same_padding(h, kh, stride)
    wo, pl, pr = same_padding(wd, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else x
    cols = _windows(xp, kh, kw, ho, wo, stride).reshape(b * ho * wo, kh * kw * c)
    out = (cols @ w.reshape(kh * kw * c, cout)).reshape(b, ho, wo, cout)
    return out, cols, xp.shape, (pt, pl)


def _col2im(gcols: np.ndarray, padded_shape, kh, kw, ho, wo, stride, h, wd, pt, pl) -> np.ndarray:
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
    return gxp[:, pt : pt + h, pl : pl + wd, :]


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D correlation with "same" padding: output extent ``ceil(in / stride)``.

    ``weights`` has shape (kh, kw, in_depth, out_depth).
    """
    _check4(x, "conv2d")
    if weights.data.ndim != 4:
        raise ShapeError(f"conv2d: weights must be 4-d, got {weights.shape}")
    kh, kw, cin, cout = weights.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input depth {x.shape[3]} != weight input depth {cin}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    b, h, wd, _ = x.shape
    out, cols, padded_shape, (pt, pl) = _conv_core(x.data, weights.data, stride)
    ho, wo = out.shape[1:3]
    if bias is not None:
        out += bias.data
    w = weights.data

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if weights.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w.reshape(-1, cout).T).reshape(b, ho, wo, kh, kw, cin)
            gx = _col2im(gcols, padded_shape, kh, kw, ho, wo, stride, h, wd, pt, pl)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _result(out, parents, back, "conv2d")


def conv2d_transpose(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Adjoint of :func:`conv2d`: output extent ``in * stride``.

    ``weights`` has shape (kh, kw, in_depth, out_depth) with in/out taken
    from this op's point of view.  Input pixel (y, x) scatters
    ``x[y, x] @ weights[i, j]`` to output (stride*y + i - pad, stride*x + j - pad).
    """
    _check4(x, "conv2d_transpose")
    if weights.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose: weights must be 4-d, got {weights.shape}")
    kh, kw, cin, cout = weights.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d_transpose: input depth {x.shape[3]} != weight input depth {cin}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d_transpose: stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")
    b, h, wd, _ = x.shape
    ho, wo = h * stride, wd * stride
    _, pt, _ = same_padding(ho, kh, stride)
    _, pl, _ = same_padding(wo, kw, stride)
    bh = max((h - 1) * stride + kh, pt + ho)
    bw = max((wd - 1) * stride + kw, pl + wo)
    w = weights.data
    wmat = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    x2 = x.data.reshape(-1, cin)
    buf = np.zeros((b, bh, bw, cout), dtype=x2.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = (x2 @ w[i, j]).reshape(b, h, wd, cout)
            buf[:, i : i + stride * h : stride, j : j + stride * wd : stride, :] += tap
    out = np.ascontiguousarray(buf[:, pt : pt + ho, pl : pl + wo, :])
    if bias is not None:
        out += bias.data

    def back(g):
        gbuf = np.zeros((b, bh, bw, cout), dtype=g.dtype)
        gbuf[:, pt : pt + ho, pl : pl + wo, :] = g
        gtaps = _windows(gbuf, kh, kw, h, wd, stride).reshape(b * h * wd, kh * kw * cout)
        gx = (gtaps @ wmat.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weights.requires_grad:
            gw = (x2.T @ gtaps).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
            gw = np.ascontiguousarray(gw)
        gb = g.reshape(-1, cout).sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _result(out, parents, back, "conv2d_transpose")


def depthwise_conv2d(x: Tensor, weights: Tensor, padding: str = "valid") -> Tensor:
    """Per-channel spatial correlation, stride 1, no cross-channel mixing.

    ``weights`` has shape (kh, kw, depth, multiplier); output channel
    ``c * multiplier + m`` is channel ``c`` filtered by ``weights[..., c, m]``.
    """
    _check4(x, "depthwise_conv2d")
    if weights.data.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: weights must be 4-d, got {weights.shape}")
    kh, kw, c, mult = weights.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: input depth {x.shape[3]} != weight depth {c}")
    b, h, wd, _ = x.shape
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, 1)
        wo, pl, pr = same_padding(wd, kw, 1)
    elif padding == "valid":
        if kh > h or kw > wd:
            raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
        ho, wo, pt, pb, pl, pr = h - kh + 1, wd - kw + 1, 0, 0, 0, 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _windows(xp, kh, kw, ho, wo, 1)
    w = weights.data
    out = np.einsum("bhwijc,ijcm->bhwcm", win, w, optimize=True).reshape(b, ho, wo, c * mult)

    def back(g):
        g5 = g.reshape(b, ho, wo, c, mult)
        gw = np.einsum("bhwijc,bhwcm->ijcm", win, g5, optimize=True) if weights.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.einsum("bhwcm,ijcm->bhwijc", g5, w, optimize=True)
            gx = _col2im(gwin, xp.shape, kh, kw, ho, wo, 1, h, wd, pt, pl)
        return gx, gw

    return _result(out, (x, weights), back, "depthwise_conv2d")


def pointwise_conv2d(x: Tensor, weights: Tensor) -> Tensor:
    """Per-pixel linear map across channels; ``weights`` is (1, 1, in, out)."""
    _check4(x, "pointwise_conv2d")
    if weights.data.ndim != 4 or weights.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise_conv2d: weights must be 1x1xinxout, got {weights.shape}")
    cin, cout = weights.shape[2:]
    if x.shape[3] != cin:
        raise ShapeError(f"pointwise_conv2d: input depth {x.shape[3]} != weight input depth {cin}")
    m = weights.data.reshape(cin, cout)
    x2 = x.data.reshape(-1, cin)
    out = (x2 @ m).reshape(x.shape[:3] + (cout,))

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ m.T).reshape(x.shape) if x.requires_grad else None
        gw = (x2.T @ g2).reshape(weights.shape) if weights.requires_grad else None
        return gx, gw

    return _result(out, (x, weights), back, "pointwise_conv2d")
