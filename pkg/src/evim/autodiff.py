"""Reverse-mode automatic differentiation over the tensor kernel set.

A `Var` wraps an ndarray and records the computation graph as it is built;
`backward` replays the graph in reverse topological order. Every public op
here doubles as a dispatcher: called on plain arrays it runs the fast kernel
from `ops` with no tape, called on (or with) `Var` operands it records the
node. Layer code is therefore written once and works for both inference and
training.

Gradients are validated against central finite differences; see
`numerical_gradient` and `max_rel_err` at the bottom.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .ops import ContractError


class Var:
    """A node of the differentiation tape.

    Holds the forward value, references to its input nodes, and a closure
    that maps the output gradient to input-gradient accumulations. The graph
    is acyclic by construction (nodes only reference previously built nodes).
    """

    __slots__ = ("value", "grad", "op", "_parents", "_bwd")

    # keep numpy from hijacking mixed expressions like `ndarray * Var`
    __array_ufunc__ = None

    def __init__(self, value, parents=(), bwd=None, op="leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar; definitions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, other):
        return mul(self, power(other, -1.0) if isinstance(other, Var) else 1.0 / other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


def is_var(x) -> bool:
    return isinstance(x, Var)


def _tracing(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x, op="const")


def _accum(v: Var, g: np.ndarray) -> None:
    v.grad = g if v.grad is None else v.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(out: Var, seed: np.ndarray | None = None) -> None:
    """Propagate `seed` (default: ones) from `out` to every reachable leaf.

    Gradients accumulate into `.grad`; call `zero_grad` on reused leaves
    between passes.
    """
    if seed is None:
        seed = np.ones_like(out.value)
    seed = np.asarray(seed)
    if seed.shape != out.value.shape:
        raise ContractError(
            f"seed gradient shape {seed.shape} does not match output {out.value.shape}"
        )
    _accum(out, seed.astype(out.value.dtype, copy=False))
    for node in reversed(_topo_order(out)):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def zero_grad(vars: Sequence[Var]) -> None:
    for v in vars:
        v.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    if not _tracing(a, b):
        return a + b
    if isinstance(a, (int, float)):
        a, b = b, a
    if isinstance(b, (int, float)):
        # python scalars stay unwrapped so numpy's weak promotion keeps dtype
        a = _lift(a)
        out = Var(a.value + b, (a,), op="add")
        out._bwd = lambda g: _accum(a, g)
        return out
    a, b = _lift(a), _lift(b)
    out = Var(a.value + b.value, (a, b), op="add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out._bwd = bwd
    return out


def neg(a):
    if not _tracing(a):
        return -a if isinstance(a, (int, float)) else -np.asarray(a)
    a = _lift(a)
    out = Var(-a.value, (a,), op="neg")
    out._bwd = lambda g: _accum(a, -g)
    return out


def mul(a, b):
    if not _tracing(a, b):
        return a * b
    if isinstance(a, (int, float)):
        a, b = b, a
    if isinstance(b, (int, float)):
        a = _lift(a)
        out = Var(a.value * b, (a,), op="mul")
        out._bwd = lambda g: _accum(a, g * b)
        return out
    a, b = _lift(a), _lift(b)
    out = Var(a.value * b.value, (a, b), op="mul")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out._bwd = bwd
    return out


def matmul(a, b):
    if not _tracing(a, b):
        return ops.matmul(a, b)
    a, b = _lift(a), _lift(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ContractError("taped matmul operands must have >= 2 dims")
    out = Var(ops.matmul(a.value, b.value), (a, b), op="matmul")

    def bwd(g):
        bt = np.swapaxes(b.value, -1, -2)
        at = np.swapaxes(a.value, -1, -2)
        _accum(a, _unbroadcast(g @ bt, a.value.shape))
        _accum(b, _unbroadcast(at @ g, b.value.shape))

    out._bwd = bwd
    return out


def power(a, p: float):
    if not _tracing(a):
        return np.asarray(a) ** p
    a = _lift(a)
    out = Var(a.value**p, (a,), op=f"pow{p}")
    out._bwd = lambda g: _accum(a, g * (p * a.value ** (p - 1)))
    return out


def exp(a):
    if not _tracing(a):
        return np.exp(np.asarray(a))
    a = _lift(a)
    out = Var(np.exp(a.value), (a,), op="exp")
    out._bwd = lambda g: _accum(a, g * out.value)
    return out


def log(a):
    if not _tracing(a):
        return np.log(np.asarray(a))
    a = _lift(a)
    out = Var(np.log(a.value), (a,), op="log")
    out._bwd = lambda g: _accum(a, g / a.value)
    return out


def getitem(a, key):
    if not _tracing(a):
        return np.asarray(a)[key]
    a = _lift(a)
    out = Var(a.value[key], (a,), op="getitem")
    basic = _is_basic_index(key)

    def bwd(g):
        buf = np.zeros_like(a.value)
        if basic:
            buf[key] += g
        else:
            np.add.at(buf, key, g)
        _accum(a, buf)

    out._bwd = bwd
    return out


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int)) or k is Ellipsis or k is None for k in items)


def reshape(a, shape):
    if not _tracing(a):
        return np.asarray(a).reshape(shape)
    a = _lift(a)
    out = Var(a.value.reshape(shape), (a,), op="reshape")
    out._bwd = lambda g: _accum(a, g.reshape(a.value.shape))
    return out


def swapaxes(a, i: int, j: int):
    if not _tracing(a):
        return np.swapaxes(np.asarray(a), i, j)
    a = _lift(a)
    out = Var(np.swapaxes(a.value, i, j), (a,), op="swapaxes")
    out._bwd = lambda g: _accum(a, np.swapaxes(g, i, j))
    return out


def concat(parts, axis: int = -1):
    if not _tracing(*parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    parts = [_lift(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), op="concat")
    sizes = [p.value.shape[axis] for p in parts]

    def bwd(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for p, gp in zip(parts, splits):
            _accum(p, gp)

    out._bwd = bwd
    return out


def pad_hw(a, pad: int):
    """Zero-pad the two spatial axes of a (..., H, W, C) tensor."""
    if not _tracing(a):
        return ops._pad_hw(np.asarray(a), pad)
    a = _lift(a)
    out = Var(ops._pad_hw(a.value, pad), (a,), op="pad_hw")

    def bwd(g):
        _accum(a, g[..., pad:-pad, pad:-pad, :])

    out._bwd = bwd
    return out


def sum_(a, axis=None, keepdims: bool = False):
    if not _tracing(a):
        return np.asarray(a).sum(axis=axis, keepdims=keepdims)
    a = _lift(a)
    out = Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), op="sum")

    def bwd(g):
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False))

    out._bwd = bwd
    return out


def mean(a, axis=None, keepdims: bool = False):
    val = a.value if isinstance(a, Var) else np.asarray(a)
    if axis is None:
        n = val.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= val.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a):
    if not _tracing(a):
        return ops.relu(a)
    a = _lift(a)
    out = Var(ops.relu(a.value), (a,), op="relu")
    out._bwd = lambda g: _accum(a, g * (a.value > 0))
    return out


def sigmoid(a):
    if not _tracing(a):
        return ops.sigmoid(a)
    a = _lift(a)
    out = Var(ops.sigmoid(a.value), (a,), op="sigmoid")
    out._bwd = lambda g: _accum(a, g * (out.value * (1.0 - out.value)))
    return out


def silu(a):
    if not _tracing(a):
        return ops.silu(a)
    return mul(a, sigmoid(a))


def softplus(a):
    if not _tracing(a):
        return ops.softplus(a)
    a = _lift(a)
    out = Var(ops.softplus(a.value), (a,), op="softplus")
    out._bwd = lambda g: _accum(a, g * ops.sigmoid(a.value))
    return out


def softmax(a, axis: int = -1):
    if not _tracing(a):
        return ops.softmax(a, axis=axis)
    a = _lift(a)
    y = ops.softmax(a.value, axis=axis)
    out = Var(y, (a,), op="softmax")

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, (g - inner) * y)

    out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# composite ops shared with the kernel layer


def pwconv(x, w, bias=None):
    if not _tracing(x, w, bias):
        return ops.pwconv(x, w, bias)
    y = matmul(x, w)
    return y if bias is None else add(y, bias)


def dwconv3x3(x, k, bias=None, stride: int = 1):
    if not _tracing(x, k, bias):
        return ops.dwconv3x3(x, k, bias, stride=stride)
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    h, w = xv.shape[-3], xv.shape[-2]
    ho = h if stride == 1 else (h + 1) // 2
    wo = w if stride == 1 else (w + 1) // 2
    xp = pad_hw(x, 1)
    out = None
    for di in range(3):
        for dj in range(3):
            win = getitem(
                xp,
                (
                    Ellipsis,
                    slice(di, di + stride * (ho - 1) + 1, stride),
                    slice(dj, dj + stride * (wo - 1) + 1, stride),
                    slice(None),
                ),
            )
            term = mul(win, getitem(k, (di, dj)) if isinstance(k, Var) else np.asarray(k)[di, dj])
            out = term if out is None else add(out, term)
    return out if bias is None else add(out, bias)


def conv3x3(x, w, bias=None, stride: int = 1):
    if not _tracing(x, w, bias):
        return ops.conv3x3(x, w, bias, stride=stride)
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    h, hw = xv.shape[-3], xv.shape[-2]
    ho = h if stride == 1 else (h + 1) // 2
    wo = hw if stride == 1 else (hw + 1) // 2
    xp = pad_hw(x, 1)
    out = None
    for di in range(3):
        for dj in range(3):
            win = getitem(
                xp,
                (
                    Ellipsis,
                    slice(di, di + stride * (ho - 1) + 1, stride),
                    slice(dj, dj + stride * (wo - 1) + 1, stride),
                    slice(None),
                ),
            )
            tap = getitem(w, (di, dj)) if isinstance(w, Var) else np.asarray(w)[di, dj]
            term = matmul(win, tap)
            out = term if out is None else add(out, term)
    return out if bias is None else add(out, bias)


def layer_norm(x, gamma, beta, eps: float = ops.LN_EPS):
    if not _tracing(x, gamma, beta):
        return ops.layer_norm(x, gamma, beta, eps)
    mu = mean(x, axis=-1, keepdims=True)
    xc = add(x, neg(mu))
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def batch_norm_infer(x, mean_, var_, gamma, beta, eps: float = ops.BN_EPS):
    if not _tracing(x, gamma, beta):
        return ops.batch_norm_infer(x, mean_, var_, gamma, beta, eps)
    inv = np.asarray(var_ + eps) ** -0.5
    return add(mul(mul(add(x, -np.asarray(mean_)), inv), gamma), beta)


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-5):
    """Central-difference gradients of scalar f() w.r.t. each array, in place.

    Each coordinate is perturbed one at a time, so this is only for small
    configurations (and f64 inputs, to leave the oracle headroom).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |numeric|), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    build_loss: Callable[[], Var],
    params: Sequence[Var],
    eps: float = 1e-5,
) -> float:
    """Compare taped gradients of build_loss() against central differences.

    Returns the worst relative error over every coordinate of every param.
    """
    zero_grad(params)
    loss = build_loss()
    backward(loss, np.ones_like(loss.value))
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    numeric = numerical_gradient(
        lambda: float(build_loss().value), [p.value for p in params], eps=eps
    )
    return max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
