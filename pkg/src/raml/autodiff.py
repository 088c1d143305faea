"""Minimal dense tensor with define-by-run reverse-mode differentiation.

Every operation whose inputs require gradients appends a node to the graph
owned by those inputs (or, for leaves, the thread's current graph);
``backward`` walks the nodes in reverse record order and consumes the graph.
Only scalar-vs-tensor broadcasting is supported.
"""
from __future__ import annotations

import enum
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, GraphStateError, ShapeError

NORM_EPS = 1e-12


class Precision(enum.Enum):
    VERIFY = "verify"
    RUN = "run"

    @property
    def dtype(self):
        return np.float64 if self is Precision.VERIFY else np.float32

    @classmethod
    def of(cls, dtype) -> "Precision":
        return cls.VERIFY if np.dtype(dtype) == np.float64 else cls.RUN


class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Graph:
    """Append-only record of operations; single use."""

    def __init__(self, precision: Precision):
        self.precision = precision
        self.nodes: list[_Node] = []
        self.consumed = False

    def record(self, inputs, output, rule):
        if self.consumed:
            raise GraphStateError("graph already differentiated; run a new forward pass")
        self.nodes.append(_Node(inputs, output, rule))


_local = threading.local()


def current_graph(precision: Precision) -> Graph:
    """Graph new operations on leaves record into; replaced once differentiated."""
    g = getattr(_local, "graph", None)
    if g is None or g.consumed or g.precision is not precision:
        g = _local.graph = Graph(precision)
    return g


def reset_graph() -> None:
    """Drop the current graph without differentiating it."""
    _local.graph = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph", "name")

    def __init__(self, data, requires_grad=False, precision: Precision | None = None, name=""):
        if isinstance(data, Tensor):
            data = data.data
        if precision is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        else:
            dtype = precision.dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def is_leaf(self):
        return self._graph is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` and record a node when any input needs gradients."""
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise DomainError(f"mixed precision in one graph: {sorted(str(d) for d in dtypes)}")
    out = Tensor(data, precision=Precision.of(inputs[0].data.dtype))
    if not any(t.requires_grad for t in inputs):
        return out
    graphs = {id(t._graph): t._graph for t in inputs if t._graph is not None}
    if len(graphs) > 1:
        raise GraphStateError("operation mixes tensors from two different graphs")
    graph = next(iter(graphs.values())) if graphs else current_graph(out.precision)
    out.requires_grad = True
    out._graph = graph
    graph.record(tuple(inputs), out, rule)
    return out


def _check_finite(data, opname):
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{opname} produced non-finite values")


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.size == 1 and t.ndim <= 1


def _unbroadcast(g, t: Tensor):
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _binary_operands(a, b, opname):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{opname} needs at least one Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not equal and neither is scalar")
    return a, b


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a), _unbroadcast(-g * a.data / b.data ** 2, b)))


def scalar_mul(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(t.data * t.data.dtype.type(c), (t,), lambda g: (g * g.dtype.type(c),))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return _result(np.where(mask, t.data, 0).astype(t.data.dtype), (t,), lambda g: (g * mask,))


def clamp_min(t: Tensor, lo: float) -> Tensor:
    mask = t.data > lo
    out = np.where(mask, t.data, t.data.dtype.type(lo)).astype(t.data.dtype)
    return _result(out, (t,), lambda g: (g * mask,))


def pow(t: Tensor, exponent) -> Tensor:
    """Elementwise power; ``exponent`` is a float or a scalar Tensor."""
    if isinstance(exponent, Tensor):
        if not _is_scalar(exponent):
            raise DimensionError(f"pow: exponent must be scalar, got shape {exponent.shape}")
        if np.any(t.data <= 0):
            raise DomainError("pow with tensor exponent requires strictly positive base")
        return exp(mul(exponent, log(t)))
    e = float(exponent)
    x = t.data
    if not float(e).is_integer() and np.any(x < 0):
        raise DomainError(f"pow: negative base with non-integer exponent {e}")
    if e < 0 and np.any(x == 0):
        raise DomainError(f"pow: zero base with negative exponent {e}")
    out = np.power(x, x.dtype.type(e))

    def rule(g):
        if e == 0:
            return (np.zeros_like(g),)
        return (g * x.dtype.type(e) * np.power(x, x.dtype.type(e - 1)),)

    return _result(out, (t,), rule)


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    _check_finite(out, "exp")
    return _result(out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise DomainError("log: non-positive argument")
    x = t.data
    return _result(np.log(x), (t,), lambda g: (g / x,))


def elementwise(op: str, *args):
    ops = {"add": add, "sub": sub, "mul": mul, "scalar_mul": scalar_mul,
           "relu": relu, "pow": pow, "exp": exp, "log": log}
    try:
        fn = ops[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- shape ops ----------------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = t.data.reshape(shape)
        shape = out.shape
    except ValueError:
        raise DimensionError(f"reshape: cannot view {t.shape} as {shape}") from None
    return _result(out, (t,), lambda g: (g.reshape(t.shape),))


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {t.shape}")
    return _result(t.data.T, (t,), lambda g: (g.T,))


def index_rows(t: Tensor, idx) -> Tensor:
    """Gather rows ``t[idx]``; the backward pass scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    if t.ndim < 1:
        raise DimensionError("index_rows on a 0-d tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise DimensionError(f"index_rows: index out of range for shape {t.shape}")

    def rule(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(t.data[idx], (t,), rule)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    tail = {t.shape[1:] for t in tensors}
    if len(tail) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ {sorted(tail)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _result(out, tuple(tensors), lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


# -- reductions ---------------------------------------------------------------

def _norm_axes(t: Tensor, axes):
    if axes is None:
        return tuple(range(t.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({a % t.ndim if t.ndim else a for a in axes}))
    if not axes:
        raise DomainError("reduction over an empty axis set")
    for a in axes:
        if not 0 <= a < t.ndim:
            raise DimensionError(f"axis {a} invalid for shape {t.shape}")
    return axes


def reduce_sum(t: Tensor, axes=None) -> Tensor:
    if t.ndim == 0:
        return _result(t.data.copy(), (t,), lambda g: (g,))
    axes = _norm_axes(t, axes)
    out = t.data.sum(axis=axes)

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axes), t.shape).copy(),)

    return _result(out, (t,), rule)


def reduce_mean(t: Tensor, axes=None) -> Tensor:
    if t.ndim == 0:
        return _result(t.data.copy(), (t,), lambda g: (g,))
    axes = _norm_axes(t, axes)
    count = int(np.prod([t.shape[a] for a in axes]))
    if count == 0:
        raise DomainError("mean over zero elements")
    out = t.data.mean(axis=axes)
    scale = t.data.dtype.type(1.0 / count)

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g * scale, axes), t.shape).copy(),)

    return _result(out, (t,), rule)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Zero-padded cross-correlation, ``x``: N×C×H×W, ``kernel``: O×C×k×k."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, k, k2 = kernel.shape
    if kc != c or k != k2:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1 or pad < 0:
        raise DomainError(f"conv2d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (pad={pad})")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, k, k) im2col buffer shared by forward and kernel gradient
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gx_cols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gx_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(out, inputs, rule)


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Row-wise ``v / max(||v||, eps)`` with the full quotient-rule Jacobian."""
    if v.ndim != 2:
        raise DimensionError(f"l2_normalize expects N×d, got {v.shape}")
    x = v.data
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    clamped = norm > eps
    denom = np.where(clamped, norm, x.dtype.type(eps))
    out = x / denom

    def rule(g):
        # where the norm is floored the map is linear: x/eps
        dot = (g * out).sum(axis=1, keepdims=True)
        gx = np.where(clamped, (g - out * dot) / denom, g / denom)
        return (gx.astype(x.dtype),)

    return _result(out, (v,), rule)


# -- differentiation ----------------------------------------------------------

def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Leaves listed in ``inputs`` get a zero gradient even when the loss does
    not depend on them.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for t in inputs:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)
    graph = loss._graph
    if graph is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphStateError("loss has no recorded graph (nothing requires grad)")
    if not graph.nodes:
        raise GraphStateError("empty graph")
    if graph.consumed:
        raise GraphStateError("backward called twice on the same graph")
    graph.consumed = True
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and t._graph is None and t.grad is None:
                t.grad = np.zeros_like(t.data)
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
            if t._graph is None:
                t.grad = t.grad + gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``fn`` must map a Tensor to a scalar Tensor; evaluated in 64-bit.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True, precision=Precision.VERIFY)
    out = fn(x)
    if out.data.dtype != np.float64:
        raise DomainError("grad_check requires verify (64-bit) precision")
    backward(out, inputs=[x])
    analytic = x.grad.ravel()
    numeric = np.empty_like(analytic)
    flat = x0.ravel()
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = fn(Tensor(plus.reshape(x0.shape), precision=Precision.VERIFY)).item()
        fm = fn(Tensor(minus.reshape(x0.shape), precision=Precision.VERIFY)).item()
        numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
