"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every primitive evaluates eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.  Results
that depend on no differentiable input are plain constants with no parents,
so frozen sub-networks cost nothing during the backward pass.

Gradient arrays are never mutated in place: accumulation always allocates,
which lets backward closures hand the same array to several parents.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeError, UsageError
from ._kernels import col2im

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A value in the computation graph together with its gradient."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "name", "consumed")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = None if value is None else np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self.consumed = False

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        if self.value is None:
            raise UsageError(f"leaf {self.name or '?'} has no bound value")
        return self.value.shape

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def T(self) -> Node:
        return transpose(self)

    def bind(self, value) -> None:
        self.value = np.asarray(value, dtype=DTYPE)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def sum(self, axis=None, keepdims: bool = False) -> Node:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Node:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Node:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None, retain_graph: bool = False) -> None:
        backward(self, grad, retain_graph)

    def __repr__(self) -> str:
        shape = None if self.value is None else self.value.shape
        return f"Node(op={self.op}, shape={shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __rmatmul__ = lambda self, o: matmul(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, idx: getitem(self, idx)  # noqa: E731

    def __pow__(self, p):
        return power(self, p)

    __hash__ = object.__hash__


def leaf(value, requires_grad: bool = True, name: str | None = None) -> Node:
    return Node(value, requires_grad=requires_grad, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def placeholder(name: str | None = None) -> Node:
    """A differentiable leaf whose value is bound later."""
    return Node(None, requires_grad=True, name=name)


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def detach(x: Node) -> Node:
    """Stop-gradient: same value, no path back to ``x``."""
    return Node(lift(x).value)


def _val(n: Node, op: str) -> np.ndarray:
    if n.value is None:
        raise UsageError(f"{op}: leaf {n.name or '?'} is unbound; bind a value before evaluating")
    return n.value


def _make(value: np.ndarray, parents: tuple[Node, ...], fn: BackwardFn, op: str) -> Node:
    out = Node.__new__(Node)
    out.value = value
    out.grad = None
    out.op = op
    out.name = None
    out.consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents frozen at construction time never receive gradient later
        out.parents = tuple(p if p.requires_grad else None for p in parents)
        out.backward_fn = fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = _val(a, "add"), _val(b, "add")
    _broadcast_check("add", av, bv)
    sa, sb = av.shape, bv.shape
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = _val(a, "sub"), _val(b, "sub")
    _broadcast_check("sub", av, bv)
    sa, sb = av.shape, bv.shape
    return _make(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = _val(a, "mul"), _val(b, "mul")
    ra, rb = a.requires_grad, b.requires_grad
    _broadcast_check("mul", av, bv)

    def fn(g):
        return (
            _unbroadcast(g * bv, av.shape) if ra else None,
            _unbroadcast(g * av, bv.shape) if rb else None,
        )

    return _make(av * bv, (a, b), fn, "mul")


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = _val(a, "div"), _val(b, "div")
    ra, rb = a.requires_grad, b.requires_grad
    _broadcast_check("div", av, bv)
    out = av / bv

    def fn(g):
        return (
            _unbroadcast(g / bv, av.shape) if ra else None,
            _unbroadcast(-g * out / bv, bv.shape) if rb else None,
        )

    return _make(out, (a, b), fn, "div")


def minimum(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = _val(a, "minimum"), _val(b, "minimum")
    _broadcast_check("minimum", av, bv)
    pick_a = av <= bv

    def fn(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), av.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape),
        )

    return _make(np.minimum(av, bv), (a, b), fn, "minimum")


def maximum(x, floor: float) -> Node:
    """max(x, floor) against a constant floor; zero gradient below it."""
    x = lift(x)
    xv = _val(x, "maximum")
    above = xv > floor
    return _make(np.maximum(xv, floor), (x,), lambda g: (np.where(above, g, 0.0),), "maximum")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def neg(x) -> Node:
    x = lift(x)
    return _make(-_val(x, "neg"), (x,), lambda g: (-g,), "neg")


def exp(x) -> Node:
    x = lift(x)
    out = np.exp(_val(x, "exp"))
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Node:
    x = lift(x)
    xv = _val(x, "log")
    return _make(np.log(xv), (x,), lambda g: (g / xv,), "log")


def square(x) -> Node:
    x = lift(x)
    xv = _val(x, "square")
    return _make(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def sqrt(x) -> Node:
    x = lift(x)
    out = np.sqrt(_val(x, "sqrt"))
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def power(x, p: float) -> Node:
    x = lift(x)
    xv = _val(x, "power")
    return _make(xv ** p, (x,), lambda g: (g * p * xv ** (p - 1),), "power")


def tanh(x) -> Node:
    x = lift(x)
    out = np.tanh(_val(x, "tanh"))
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and saturates to exactly 0/1 in float64
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Node:
    x = lift(x)
    out = _sigmoid(_val(x, "sigmoid"))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Node:
    x = lift(x)
    xv = _val(x, "softplus")
    return _make(np.logaddexp(0.0, xv), (x,), lambda g: (g * _sigmoid(xv),), "softplus")


def elu(x) -> Node:
    x = lift(x)
    xv = _val(x, "elu")
    neg_part = np.expm1(np.minimum(xv, 0.0))
    pos = xv > 0
    out = np.where(pos, xv, neg_part)
    return _make(out, (x,), lambda g: (g * np.where(pos, 1.0, neg_part + 1.0),), "elu")


def identity(x) -> Node:
    return lift(x)


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "elu": elu,
    "tanh": tanh,
    "identity": identity,
}


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Node:
    x = lift(x)
    xv = _val(x, "sum")
    axes = _norm_axis(axis, xv.ndim)
    shape = xv.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(xv, axis=axes, keepdims=keepdims), (x,), fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = lift(x)
    xv = _val(x, "mean")
    axes = _norm_axis(axis, xv.ndim)
    count = int(np.prod([xv.shape[a] for a in axes])) if axes else 1
    shape = xv.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _make(np.mean(xv, axis=axes, keepdims=keepdims), (x,), fn, "mean")


def logsumexp(x, axis=-1, keepdims: bool = False) -> Node:
    x = lift(x)
    xv = _val(x, "logsumexp")
    m = np.max(xv, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xv - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_k = np.log(s) + m
    soft = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (x,), fn, "logsumexp")


def softmax(x, axis=-1) -> Node:
    x = lift(x)
    xv = _val(x, "softmax")
    e = np.exp(xv - np.max(xv, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), fn, "softmax")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    """a @ b for a of rank >= 2 (leading axes are batch) and b of rank 1 or 2."""
    a, b = lift(a), lift(b)
    av, bv = _val(a, "matmul"), _val(b, "matmul")
    ra, rb = a.requires_grad, b.requires_grad
    if av.ndim < 2 or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0] or (av.ndim > 2 and bv.ndim != 2):
        raise ShapeError("matmul", f"cannot multiply {av.shape} by {bv.shape}")
    if av.ndim > 2:
        lead = av.shape[:-1]
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(lead + (bv.shape[1],))

        def fn_batched(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (
                (g2 @ bv.T).reshape(av.shape) if ra else None,
                a2.T @ g2 if rb else None,
            )

        return _make(out, (a, b), fn_batched, "matmul")

    def fn(g):
        if bv.ndim == 1:
            return (
                np.outer(g, bv) if ra else None,
                av.T @ g if rb else None,
            )
        return (
            g @ bv.T if ra else None,
            av.T @ g if rb else None,
        )

    return _make(av @ bv, (a, b), fn, "matmul")


def transpose(x) -> Node:
    x = lift(x)
    xv = _val(x, "transpose")
    if xv.ndim != 2:
        raise ShapeError("transpose", f"expected rank 2, got {xv.shape}")
    return _make(xv.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape) -> Node:
    x = lift(x)
    xv = _val(x, "reshape")
    try:
        out = xv.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {xv.shape} to {tuple(shape)}") from None
    src = xv.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x, idx) -> Node:
    x = lift(x)
    xv = _val(x, "getitem")
    try:
        out = xv[idx]
    except IndexError as exc:
        raise ShapeError("getitem", str(exc)) from None
    advanced = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def fn(g):
        full = np.zeros_like(xv)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (x,), fn, "getitem")


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = tuple(lift(n) for n in nodes)
    vals = [_val(n, "concat") for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[v.shape for v in vals]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, nodes, fn, "concat")


def stack(nodes: Iterable, axis: int = 0) -> Node:
    nodes = tuple(lift(n) for n in nodes)
    vals = [_val(n, "stack") for n in nodes]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError:
        raise ShapeError("stack", f"incompatible shapes {[v.shape for v in vals]}") from None
    ax = axis % out.ndim

    def fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(vals)))

    return _make(out, nodes, fn, "stack")


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = lift(x), lift(gain), lift(bias)
    xv = _val(x, "layer_norm")
    gv, bv = _val(gain, "layer_norm"), _val(bias, "layer_norm")
    if gv.shape != xv.shape[-1:] or bv.shape != xv.shape[-1:]:
        raise ShapeError("layer_norm", f"gain/bias {gv.shape}/{bv.shape} do not match features {xv.shape[-1:]}")
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def fn(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, bv.shape))

    return _make(xhat * gv + bv, (x, gain, bias), fn, "layer_norm")


def _patch_view(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sh, sw, sc = x.strides
    return as_strided(x, (n, ho, wo, kh, kw, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def conv2d(x, w, b, stride: int = 1) -> Node:
    """Valid-padding convolution on NHWC input with an (kh, kw, cin, cout) kernel."""
    x, w, b = lift(x), lift(w), lift(b)
    xv, wv, bv = _val(x, "conv2d"), _val(w, "conv2d"), _val(b, "conv2d")
    rx, rw, rb = x.requires_grad, w.requires_grad, b.requires_grad
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[3] != wv.shape[2] or bv.shape != (wv.shape[3],):
        raise ShapeError("conv2d", f"input {xv.shape}, kernel {wv.shape}, bias {bv.shape}")
    kh, kw, cin, cout = wv.shape
    n, h, wd, _ = xv.shape
    if h < kh or wd < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than input {h}x{wd}")
    view = _patch_view(np.ascontiguousarray(xv), kh, kw, stride)
    ho, wo = view.shape[1], view.shape[2]
    cols = view.reshape(n * ho * wo, kh * kw * cin)
    wmat = wv.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + bv).reshape(n, ho, wo, cout)

    def fn(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(wv.shape) if rw else None
        db = g2.sum(axis=0) if rb else None
        dx = None
        if rx:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            dx = col2im(dcols, np.zeros_like(xv), stride)
        return (dx, dw, db)

    return _make(out, (x, w, b), fn, "conv2d")


def conv_transpose2d(x, w, b, stride: int = 1) -> Node:
    """Adjoint of :func:`conv2d`; kernel layout (cin, kh, kw, cout)."""
    x, w, b = lift(x), lift(w), lift(b)
    xv, wv, bv = _val(x, "conv_transpose2d"), _val(w, "conv_transpose2d"), _val(b, "conv_transpose2d")
    rx, rw, rb = x.requires_grad, w.requires_grad, b.requires_grad
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[3] != wv.shape[0] or bv.shape != (wv.shape[3],):
        raise ShapeError("conv_transpose2d", f"input {xv.shape}, kernel {wv.shape}, bias {bv.shape}")
    cin, kh, kw, cout = wv.shape
    n, h, wd, _ = xv.shape
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    x2 = xv.reshape(-1, cin)
    wmat = wv.reshape(cin, kh * kw * cout)
    cols = (x2 @ wmat).reshape(n, h, wd, kh, kw, cout)
    out = col2im(cols, np.zeros((n, ho, wo, cout), dtype=DTYPE), stride)
    out += bv

    def fn(g):
        gcols = _patch_view(np.ascontiguousarray(g), kh, kw, stride).reshape(n * h * wd, kh * kw * cout)
        dx = (gcols @ wmat.T).reshape(xv.shape) if rx else None
        dw = (x2.T @ gcols).reshape(wv.shape) if rw else None
        db = g.sum(axis=(0, 1, 2)) if rb else None
        return (dx, dw, db)

    return _make(out, (x, w, b), fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_forward(root: Node) -> np.ndarray:
    """Return the value at ``root``; values are computed when ops are built."""
    if root.value is None:
        raise UsageError(f"root {root.name or root.op} has no value; bind all leaves first")
    return root.value


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node, grad=None, retain_graph: bool = False) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every differentiable leaf's ``grad``.

    Returns a map from each reached leaf to its accumulated gradient.  Unless
    ``retain_graph`` is set the interior of the graph is released afterwards
    and a second backward through it raises :class:`UsageError`.
    """
    if root.value is None:
        raise UsageError("backward called before the forward value exists")
    if root.consumed:
        raise UsageError("graph was already released by a previous backward pass")
    if not root.requires_grad:
        raise UsageError("root does not depend on any differentiable leaf")
    seed = np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=DTYPE)
    if seed.shape != root.value.shape:
        raise ShapeError("backward", f"seed gradient {seed.shape} does not match root {root.value.shape}")

    order = _topo(root)
    interior_grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = interior_grads.pop(id(node), None)
        if node.backward_fn is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        if g is None:
            continue
        node.grad = g
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or p is None:
                continue
            key = id(p)
            prev = interior_grads.get(key)
            interior_grads[key] = pg if prev is None else prev + pg
        if not retain_graph:
            node.parents = ()
            node.backward_fn = None
            node.consumed = True
    return leaves


grad_backward = backward
