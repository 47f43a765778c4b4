"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tracked tensor appends a node to the tape with a
monotonically increasing sequence number. ``backward`` walks the nodes
reachable from the root in strictly decreasing sequence order and releases
them afterwards, so a graph can be differentiated only once.

Binary operations require identical shapes; the only broadcasting allowed is
against a scalar (a Python number or a 0-d tensor).
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels

_EXP_MAX = 709.0


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class GraphError(RuntimeError):
    """Invalid use of the tape (non-scalar root, consumed graph)."""


_seq = itertools.count()


class _Node:
    __slots__ = ("seq", "parents", "backward_fn", "consumed", "op")

    def __init__(self, op, parents, backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward_fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.ndim == 0 or b.ndim == 0 or a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for d, (x, y) in enumerate(zip(a.shape, b.shape)):
        if x != y:
            raise ShapeError(f"{op}: dimension {d} differs ({x} vs {y}) for shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    return np.asarray(g.sum()) if shape == () else g


def _first_bad_index(mask: np.ndarray):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError(f"div: zero divisor at index {_first_bad_index(b.data == 0)}")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent; non-integer ``p`` needs ``a >= 0``."""
    a = as_tensor(a)
    p = float(p)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError(f"power: negative base at index {_first_bad_index(a.data < 0)}")
    out = a.data ** p

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, "power", (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)

    def bw(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _make(out, "softplus", (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = ~(a.data > 0)
    if np.any(bad):
        raise DomainError(f"log: non-positive input at index {_first_bad_index(bad)}")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    bad = ~(a.data <= _EXP_MAX)
    if np.any(bad):
        raise DomainError(f"exp: input overflows at index {_first_bad_index(bad)}")
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    # np.maximum keeps NaN visible instead of mapping it to zero
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes) / count

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),)

    return _make(out, "mean", (a,), bw)


# ---------------------------------------------------------------- structural

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    for t in ts[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank mismatch {ref.shape} vs {t.shape}")
        for d in range(ref.ndim):
            if d != axis % ref.ndim and t.shape[d] != ref.shape[d]:
                raise ShapeError(f"concat: dimension {d} differs ({ref.shape[d]} vs {t.shape[d]})")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def channel_scale(w, z) -> Tensor:
    """Scale slice ``w[i]`` by ``z[i]`` (per-output-channel modulation)."""
    w, z = as_tensor(w), as_tensor(z)
    if z.ndim != 1 or z.shape[0] != w.shape[0]:
        raise ShapeError(f"channel_scale: dimension 0 of {w.shape} must match vector of shape {z.shape}")
    zz = z.data.reshape((-1,) + (1,) * (w.ndim - 1))
    axes = tuple(range(1, w.ndim))
    return _make(w.data * zz, "channel_scale", (w, z),
                 lambda g: (g * zz, (g * w.data).sum(axis=axes)))


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D or 2-D @ 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimension {a.shape[1]} vs {b.shape[0]}")

    def bw(g):
        if b.ndim == 1:
            return (np.outer(g, b.data), a.data.T @ g)
        return (g @ b.data.T, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


# -------------------------------------------------------------- convolutional

def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 (N,C,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4 (Cout,Cin,kh,kw), got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels (dimension 1) {cin} != kernel channels {kcin}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded width {w + 2 * padding}")
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({cout},)")
        parents.append(bias)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def bw(g):
        g = g.reshape(n, cout, ho * wo)
        # batched matmul on a transposed view; tensordot would copy both operands
        dk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dx = kernels.col2im(np.matmul(wmat.T, g), x.shape, kh, kw, stride, padding) if x.requires_grad else None
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, "conv2d", tuple(parents), bw)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"upsample_nearest2x: expected non-empty (N,C,H,W), got {x.shape}")
    return _make(kernels.upsample2x(x.data), "upsample", (x,),
                 lambda g: (kernels.upsample2x_backward(g),))


def avg_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2x2: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial extents must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (0.25 * kernels.upsample2x(g),)

    return _make(out, "avg_pool", (x,), bw)


# ------------------------------------------------------------------- backward

def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    node = root._node
    if node is None:
        return
    if node.consumed:
        raise GraphError("graph already consumed; run a new forward pass first")

    order = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        nd = t._node
        if nd is None or id(nd) in seen:
            continue
        seen.add(id(nd))
        if nd.consumed:
            raise GraphError("graph already consumed; run a new forward pass first")
        order.append(t)
        stack.extend(nd.parents)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    grads = {id(root): np.ones(root.shape)}
    for t in order:
        nd = t._node
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(nd.parents, nd.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        nd.consumed = True
        nd.backward_fn = None
        nd.parents = ()


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` must be smooth near ``point``; kinks (e.g. relu at 0) are out of scope.
    The step is rounded to the nearest power of two and differences are divided
    by the realized step ``(x + h) - (x - h)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    h = 2.0 ** round(math.log2(eps))
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise GraphError("grad_check needs a scalar-valued function")
    backward(y)
    analytic = np.zeros_like(x0) if x.grad is None else x.grad

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi, lo = orig + h, orig - h
        flat[i] = hi
        fp = f(Tensor(x0.copy())).item()
        flat[i] = lo
        fm = f(Tensor(x0.copy())).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError(f"grad_check: non-finite value at perturbed coordinate {i}")
        num_flat[i] = (fp - fm) / (hi - lo)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
