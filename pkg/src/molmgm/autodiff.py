"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every model in the package is written against :class:`Value`. Forward kernels
that act row-wise over atoms use unoptimized ``np.einsum`` and order-free
reductions (:func:`invariant_sum`) so that relabeling atoms permutes outputs
bit-exactly; BLAS is only used on backward paths, or inside :func:`fast_matmul`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_grad_enabled = True
_row_exact = True


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (outputs have requires_grad=False)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def fast_matmul():
    """Route 2-D right-operand matmuls through BLAS.

    Roughly twice as fast for training, but BLAS blocking means a row's result can
    depend on its position, so permutation equivariance is then only approximate.
    """
    global _row_exact
    prev = _row_exact
    _row_exact = False
    try:
        yield
    finally:
        _row_exact = prev


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic -------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis=axis, keepdims=keepdims)

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

    @property
    def T(self):
        return transpose(self, None)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: Sequence[Value], backward_fn: Callable, op: str) -> Value:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Value(data, True, tuple(parents), backward_fn, op)
    return Value(data, False, (), None, op)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise binary -----------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, exponent: float) -> Value:
    a = as_value(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data ** exponent, (a,), bw, "pow")


# elementwise unary ------------------------------------------------------

def exp(x) -> Value:
    x = as_value(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Value:
    x = as_value(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Value:
    x = as_value(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x) -> Value:
    x = as_value(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Value:
    x = as_value(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x) -> Value:
    """x * sigmoid(x)."""
    x = as_value(x)
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(x.data * s, (x,), bw, "silu")


def relu(x) -> Value:
    x = as_value(x)
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


def vabs(x) -> Value:
    x = as_value(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def cos(x) -> Value:
    x = as_value(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def stop_gradient(x) -> Value:
    """Forward identity (exact copy); contributes nothing to upstream gradients."""
    x = as_value(x)
    return Value(x.data.copy(), False, (), None, "stop_gradient")


# reductions and shape ops ------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def vsum(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return vsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def invariant_sum(x, axis: int, keepdims: bool = False) -> Value:
    """Sum along ``axis`` in sorted order, so the result ignores the order of terms.

    Used for every reduction over atoms: a relabeled molecule then yields
    bit-identical sums.
    """
    x = as_value(x)
    ax = axis % x.ndim
    out = np.sort(x.data, axis=ax).sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "invariant_sum")


def vmax_const(x, axis: int, keepdims: bool = True) -> np.ndarray:
    return as_value(x).data.max(axis=axis, keepdims=keepdims)


def reshape(x, shape) -> Value:
    x = as_value(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Value:
    x = as_value(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x) -> Value:
    """Swap the two trailing axes."""
    x = as_value(x)
    nd = x.ndim
    return transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def expand_dims(x, axis) -> Value:
    x = as_value(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx) -> Value:
    x = as_value(x)
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "getitem")


def scatter_rows(x, index: Sequence[int], n: int) -> Value:
    """Place the rows of ``x`` at positions ``index`` of an ``n``-row zero array."""
    x = as_value(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.shape[0]:
        raise ShapeError(f"scatter of {x.shape[0]} rows into {len(index)} slots")
    out = np.zeros((n,) + x.shape[1:])
    out[index] = x.data
    return _make(out, (x,), lambda g: (g[index],), "scatter_rows")


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    ax = axis % vals[0].ndim
    sizes = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([v.data for v in vals], axis=ax), vals, bw, "concat")


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    ax = axis % (vals[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(vals)))

    return _make(np.stack([v.data for v in vals], axis=ax), vals, bw, "stack")


def split(x, sections: int, axis: int = -1) -> list[Value]:
    x = as_value(x)
    ax = axis % x.ndim
    size = x.shape[ax] // sections
    if size * sections != x.shape[ax]:
        raise ShapeError(f"cannot split axis of length {x.shape[ax]} into {sections}")
    out = []
    for k in range(sections):
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(k * size, (k + 1) * size)
        out.append(getitem(x, tuple(sl)))
    return out


# products ----------------------------------------------------------------

def matmul(a, b) -> Value:
    """``a[..., m, k] @ b[k, n]`` (or batched ``b``).

    2-D right operands run through unoptimized einsum so each output row
    depends only on its input row.
    """
    a, b = as_value(a), as_value(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        out = np.einsum("...k,kn->...n", a.data, b.data) if _row_exact else a.data @ b.data

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(out, (a, b), bw, "matmul")
    out = np.matmul(a.data, b.data)

    def bw_batched(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw_batched, "matmul")


def einsum(subscripts: str, *operands) -> Value:
    """Differentiable einsum with explicit output subscripts (no ellipsis, no repeated
    indices within one operand)."""
    ops = [as_value(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError("einsum operand count mismatch")
    dims: dict[str, int] = {}
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum subscripts {s!r} do not fit shape {o.shape}")
        for ch, n in zip(s, o.shape):
            if dims.setdefault(ch, n) != n and n != 1 and dims[ch] != 1:
                raise ShapeError(f"einsum dimension mismatch on {ch!r}")
    out = np.einsum(subscripts, *[o.data for o in ops])

    def bw(g):
        grads = []
        for k, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[j], ops[j].data) for j in range(len(ops)) if j != k]
            present = set(out_sub).union(*[set(t) for t, _ in others]) if others else set(out_sub)
            kept = "".join(ch for ch in s if ch in present)
            expr = ",".join([out_sub] + [t for t, _ in others]) + "->" + kept
            gk = np.einsum(expr, g, *[d for _, d in others], optimize=len(others) > 0)
            if kept != s:
                shape = [o.shape[i] if ch in present else 1 for i, ch in enumerate(s)]
                gk = np.broadcast_to(gk.reshape(shape), o.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _make(out, ops, bw, "einsum")


# normalization -----------------------------------------------------------

def layer_norm(x, eps: float = 1e-5) -> Value:
    """Normalize over the last axis (no affine part)."""
    x = as_value(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw, "layer_norm")


def softmax(x, axis: int = -1) -> Value:
    """Softmax whose normalizer uses :func:`invariant_sum`."""
    x = as_value(x)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / np.sort(z, axis=axis).sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def cosine_similarity(u, v, axis: int = -1) -> Value:
    """Cosine of the angle between ``u`` and ``v`` along ``axis``.

    Raises :class:`DegenerateVectorError` when any norm is below 1e-12.
    """
    u, v = as_value(u), as_value(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine operands differ in shape: {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data ** 2).sum(axis=axis))
    nv = np.sqrt((v.data ** 2).sum(axis=axis))
    if np.any(nu < 1e-12) or np.any(nv < 1e-12):
        raise DegenerateVectorError("cosine similarity of a (near) zero vector")
    dot = vsum(u * v, axis=axis)
    return dot / (sqrt(vsum(u * u, axis=axis)) * sqrt(vsum(v * v, axis=axis)))


# engine -------------------------------------------------------------------

def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack_: list[tuple[Value, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


def gradients(loss: Value, params: Mapping[str, Value]) -> dict[str, np.ndarray]:
    """Gradient map for ``params``; unreachable parameters get zeros."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def finite_diff_check(f: Callable[[Value], Value], x: Value, h: float = 1e-6,
                      indices: Iterable[int] | None = None) -> float:
    """Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12)."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = Value(np.array(x.data, dtype=np.float64), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst


def finite_diff_check_params(loss_fn: Callable[[], Value], params: Mapping[str, Value], h: float = 1e-6,
                             n_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Like :func:`finite_diff_check` but over (a sample of) coordinates of named leaves,
    perturbed in place."""
    grads = gradients(loss_fn(), params)
    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    with no_grad():
        for k, i in coords:
            flat = params[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = grads[k].reshape(-1)[i]
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst
