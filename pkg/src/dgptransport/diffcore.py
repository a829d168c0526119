"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when any input requires a
gradient, remembers its parents together with a vector-Jacobian closure.
:func:`backward` walks the recorded graph in reverse creation order, which
is a valid topological order because parents are always created before
their children. Reductions therefore happen in a fixed order and repeated
calls on an identical graph give bit-identical gradients.

Only first derivatives are supported. Quantities such as ``eps^T J eps``
that need a derivative inside the objective are built explicitly from
forward-mode tangents (see :meth:`dgptransport.nn.MLP.jvp`).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

__all__ = [
    "Tensor", "Graph", "DimensionError", "DecompositionError", "UsageError",
    "NonFiniteError", "tensor", "as_tensor", "backward", "grad", "trace",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "transpose",
    "reshape", "broadcast_to", "concat", "getitem", "sum", "mean", "exp",
    "log", "tanh", "sigmoid", "softplus", "silu", "dsilu", "square", "sqrt",
    "clip_min", "logsumexp", "cholesky", "solve_triangular", "diagonal",
    "set_finite_check",
]

_ids = itertools.count()
_CHECK_FINITE = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DecompositionError(np.linalg.LinAlgError):
    """Cholesky failed even after the maximum jitter."""


class UsageError(ValueError):
    """The API was called with arguments it cannot honour."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or inf."""


def set_finite_check(enabled: bool) -> bool:
    """Toggle the per-op finiteness check; returns the previous setting."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, bool(enabled)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp", "_id", "name")
    # make ndarray (op) Tensor defer to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64) if requires_grad else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._vjp = None
        self._id = next(_ids)
        self.name = name

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
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, vjp, op):
    value = np.asarray(value, dtype=np.float64)
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, *arrays):
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as exc:
        shapes = " vs ".join(str(a.shape) for a in arrays)
        raise DimensionError(f"{op}: cannot broadcast {shapes}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    av, bv = a.data, b.data
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    av, bv = a.data, b.data
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise UsageError("power: exponent must be a constant")
    p = float(p)
    av = a.data
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),), "pow")


def square(a):
    a = as_tensor(a)
    av = a.data
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    av = a.data
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * _sigmoid(av),), "softplus")


def silu(a):
    a = as_tensor(a)
    av = a.data
    s = _sigmoid(av)
    return _make(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),), "silu")


def dsilu(a):
    """Derivative of SiLU, itself differentiable (used for tangent propagation)."""
    a = as_tensor(a)
    av = a.data
    s = _sigmoid(av)
    ds = s * (1.0 - s)
    out = s + av * ds
    return _make(out, (a,), lambda g: (g * ds * (2.0 + av * (1.0 - 2.0 * s)),), "dsilu")


def clip_min(a, lo):
    """``max(a, lo)`` for a constant floor; gradient is zero where clipped."""
    a = as_tensor(a)
    av = a.data
    keep = av > lo
    return _make(np.where(keep, av, lo), (a,), lambda g: (g * keep,), "clip_min")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def logsumexp(a, axis=None, keepdims=False):
    a = as_tensor(a)
    av = a.data
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    se = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out_k = m + np.log(se)
    soft = np.exp(av - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), vjp, "logsumexp")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    """Swap the last two axes by default, otherwise permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {old} -> {shape}") from exc
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp, "slice")


def diagonal(a):
    """Diagonal of a square matrix."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diagonal: expected a square matrix, got {a.shape}")
    n = a.shape[0]
    return _make(np.diagonal(a.data).copy(), (a,), lambda g: (np.diag(g),), "diagonal")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: {av.shape} @ {bv.shape}")
    try:
        out = av @ bv
    except ValueError as exc:
        raise DimensionError(f"matmul: {av.shape} @ {bv.shape}") from exc

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), vjp, "matmul")


def _phi(x):
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a, jitter=1e-6, max_jitter=1e-2):
    """Lower Cholesky factor of ``a + j * mean(diag(a)) * I``.

    ``j`` starts at ``jitter`` and grows tenfold on failure up to
    ``max_jitter``; past that a :class:`DecompositionError` is raised. The
    jitter term is part of the differentiated expression.
    """
    a = as_tensor(a)
    av = a.data
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise DimensionError(f"cholesky: expected a square matrix, got {av.shape}")
    n = av.shape[0]
    scale = float(np.mean(np.diag(av)))
    if not np.isfinite(scale) or scale <= 0.0:
        raise DecompositionError("cholesky: non-positive mean diagonal")
    j = float(jitter)
    while True:
        try:
            L = np.linalg.cholesky(av + (j * scale) * np.eye(n))
            break
        except np.linalg.LinAlgError:
            j = 1e-6 if j == 0.0 else 10.0 * j
            if j > max_jitter * (1 + 1e-9):
                raise DecompositionError(
                    f"cholesky: matrix not positive definite with jitter up to {max_jitter:g}"
                ) from None

    def vjp(g):
        P = _phi(L.T @ g)
        X = sla.solve_triangular(L, P, lower=True, trans="T")
        S = sla.solve_triangular(L, X.T, lower=True, trans="T").T
        G = 0.5 * (S + S.T)
        if j:
            G = G + (j / n) * np.trace(G) * np.eye(n)
        return (G,)

    return _make(L, (a,), vjp, "cholesky")


def solve_triangular(L, b, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``."""
    L, b = as_tensor(L), as_tensor(b)
    Lv, bv = L.data, b.data
    if Lv.ndim != 2 or Lv.shape[0] != Lv.shape[1]:
        raise DimensionError(f"solve_triangular: expected a square matrix, got {Lv.shape}")
    if bv.ndim not in (1, 2) or bv.shape[0] != Lv.shape[0]:
        raise DimensionError(f"solve_triangular: {Lv.shape} vs {bv.shape}")
    t = "T" if trans else "N"
    x = sla.solve_triangular(Lv, bv, lower=True, trans=t)

    def vjp(g):
        gb = sla.solve_triangular(Lv, g, lower=True, trans="N" if trans else "T")
        x2 = x if x.ndim == 2 else x[:, None]
        gb2 = gb if gb.ndim == 2 else gb[:, None]
        gL = -(x2 @ gb2.T) if trans else -(gb2 @ x2.T)
        return np.tril(gL), gb

    return _make(x, (L, b), vjp, "solve_triangular")


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Flat view of the computation feeding a node; parents precede children."""

    ops: list = field(default_factory=list)
    parents: list = field(default_factory=list)
    leaf: list = field(default_factory=list)
    trainable: list = field(default_factory=list)

    def __len__(self):
        return len(self.ops)


def _collect(root):
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in seen)
    return sorted(seen.values(), key=lambda t: t._id)


def trace(root: Tensor) -> Graph:
    """Return the differentiable subgraph that produced ``root``."""
    nodes = _collect(root)
    index = {n._id: i for i, n in enumerate(nodes)}
    g = Graph()
    for n in nodes:
        g.ops.append(n.op)
        g.parents.append([index[p._id] for p in n._parents if p._id in index])
        g.leaf.append(n.is_leaf)
        g.trainable.append(n.is_leaf and n.requires_grad)
    return g


def backward(root: Tensor):
    """Populate ``.grad`` on every trainable leaf that ``root`` depends on.

    Existing ``.grad`` values are overwritten, not accumulated.
    """
    if not isinstance(root, Tensor):
        raise UsageError("backward: root must be a Tensor")
    if root.size != 1:
        raise UsageError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = _collect(root)
    grads = {root._id: np.ones(root.shape)}
    for node in reversed(nodes):
        g = grads.pop(node._id, None)
        if node.is_leaf:
            node.grad = np.zeros(node.shape) if g is None else g
            continue
        if g is None:
            continue
        for p, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + gp
            else:
                grads[p._id] = gp


def grad(root: Tensor, wrt):
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``."""
    wrt = list(wrt)
    for w in wrt:
        w.grad = None
    backward(root)
    return [np.zeros(w.shape) if w.grad is None else w.grad for w in wrt]
