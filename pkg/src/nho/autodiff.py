"""Reverse-mode differentiation over a closed set of dense-array primitives.

Every differentiable value is a :class:`Tensor` recorded on a :class:`Trace`
(a Wengert list).  Operations whose inputs are all plain arrays are evaluated
eagerly and return plain arrays, so the same model code serves both training
(traced) and evaluation (untraced).

Input Jacobians are built by forward-mode tangent propagation through the
same primitives (:func:`jacobian`).  The tangent arithmetic is itself recorded
on the trace, which is what makes quantities like ``||d net/dx||_F^2``
differentiable with respect to the network parameters.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

__all__ = [
    "AutodiffError",
    "UnsupportedPrimitiveError",
    "Tensor",
    "Dual",
    "Trace",
    "PRIMITIVES",
    "apply",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "tanh",
    "exp",
    "log",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "sqnorm",
    "trace",
    "broadcast_to",
    "stop_gradient",
    "value_of",
    "grad",
    "value_and_grad",
    "jacobian",
    "value_and_jacobian",
    "tree_flatten",
]


class AutodiffError(ValueError):
    """Misuse of the differentiation API (shapes, non-scalar objectives, ...)."""


class UnsupportedPrimitiveError(AutodiffError):
    def __init__(self, name: str):
        super().__init__(f"unsupported primitive: {name!r}")
        self.primitive = name


# ---------------------------------------------------------------------------
# values


class _Ops:
    __slots__ = ()
    __array_ufunc__ = None  # make numpy defer to our reflected operators

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tensor(_Ops):
    """An array value recorded on a trace."""

    __slots__ = ("value", "trace", "index")

    def __init__(self, value: np.ndarray, trace: "Trace", index: int):
        self.value = value
        self.trace = trace
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, index={self.index})"


class Dual(_Ops):
    """Primal value plus a stack of tangents along a new leading axis.

    ``tangent`` has shape ``(k,) + primal.shape`` up to broadcasting (size-1
    axes allowed), or is ``None`` for an identically zero tangent.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return np.shape(value_of(self.primal))

    @property
    def ndim(self):
        return len(self.shape)


def value_of(x) -> np.ndarray:
    """Underlying numeric value of a Tensor, Dual or array-like."""
    if isinstance(x, Tensor):
        return x.value
    if isinstance(x, Dual):
        return value_of(x.primal)
    return x


def stop_gradient(x):
    """Treat ``x`` as a constant from here on."""
    if isinstance(x, Dual):
        return value_of(x.primal)
    return value_of(x)


# ---------------------------------------------------------------------------
# the trace


class _Node:
    __slots__ = ("prim", "inputs", "attrs")

    def __init__(self, prim, inputs, attrs):
        self.prim = prim
        self.inputs = inputs
        self.attrs = attrs


class Trace:
    """Append-only record of primitive applications (one thread only).

    Entry ``i`` is either a leaf (``None``) or a node; ``values[i]`` holds the
    forward value.  Inputs of a node always precede it, so reverse insertion
    order is a valid (and deterministic) order for adjoint accumulation.
    """

    def __init__(self):
        self.entries: list[_Node | None] = []
        self.values: list[np.ndarray] = []
        self._owner = threading.get_ident()

    def __len__(self):
        return len(self.entries)

    def _check_thread(self):
        if threading.get_ident() != self._owner:
            raise AutodiffError("a Trace may only be used by the thread that created it")

    def leaf(self, value) -> Tensor:
        self._check_thread()
        value = np.asarray(value, dtype=np.float64)
        self.entries.append(None)
        self.values.append(value)
        return Tensor(value, self, len(self.values) - 1)

    def record(self, prim, inputs, attrs, value) -> Tensor:
        self._check_thread()
        self.entries.append(_Node(prim, inputs, attrs))
        self.values.append(value)
        return Tensor(value, self, len(self.values) - 1)

    def backward(self, output: Tensor, wrt: list[Tensor], seed=None) -> list[np.ndarray]:
        """Adjoints of ``output`` with respect to each tensor in ``wrt``."""
        self._check_thread()
        if output.trace is not self:
            raise AutodiffError("output tensor belongs to a different trace")
        if seed is None:
            if output.value.size != 1:
                raise AutodiffError(
                    f"objective must be scalar, got shape {output.value.shape}")
            seed = np.ones_like(output.value)
        adj: list[Any] = [None] * len(self.entries)
        adj[output.index] = np.asarray(seed, dtype=np.float64)
        keep = {t.index for t in wrt}
        for i in range(output.index, -1, -1):
            g = adj[i]
            node = self.entries[i]
            if g is None or node is None:
                continue
            vals = [x.value if isinstance(x, Tensor) else x for x in node.inputs]
            grads = node.prim.vjp(g, vals, self.values[i], **node.attrs)
            for x, gx in zip(node.inputs, grads):
                if gx is None or not isinstance(x, Tensor):
                    continue
                j = x.index
                adj[j] = gx if adj[j] is None else adj[j] + gx
            if i not in keep:
                adj[i] = None
        out = []
        for t in wrt:
            g = adj[t.index]
            out.append(np.zeros_like(t.value) if g is None else np.asarray(g))
        return out

    def release(self) -> None:
        """Drop recorded entries; tensors and nodes reference each other, so
        this frees memory without waiting for the cycle collector."""
        self.entries.clear()
        self.values.clear()

    def replay(self) -> bool:
        """Recompute every node from recorded leaves; True iff bit-identical."""
        values = list(self.values)
        for i, node in enumerate(self.entries):
            if node is None:
                continue
            vals = [values[x.index] if isinstance(x, Tensor) else x for x in node.inputs]
            new = np.asarray(node.prim.forward(*vals, **node.attrs))
            old = self.values[i]
            if new.shape != old.shape or new.tobytes() != np.asarray(old).tobytes():
                return False
            values[i] = new
        return True


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable
    jvp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _defprim(name, forward, vjp, jvp):
    PRIMITIVES[name] = Primitive(name, forward, vjp, jvp)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(x)


def _common_trace(args):
    tr = None
    for a in args:
        if isinstance(a, Tensor):
            if tr is None:
                tr = a.trace
            elif a.trace is not tr:
                raise AutodiffError("operands belong to different traces")
    return tr


def apply(name: str, *args, **attrs):
    """Apply a registered primitive; unknown names are rejected."""
    prim = PRIMITIVES.get(name)
    if prim is None:
        raise UnsupportedPrimitiveError(name)
    if any(isinstance(a, Dual) for a in args):
        return _apply_dual(prim, args, attrs)
    vals = [a.value if isinstance(a, Tensor) else a for a in args]
    out = prim.forward(*vals, **attrs)
    tr = _common_trace(args)
    if tr is None:
        return out
    inputs = tuple(a if isinstance(a, Tensor) else np.asarray(a) for a in args)
    return tr.record(prim, inputs, attrs, np.asarray(out))


def _apply_dual(prim, args, attrs):
    primals = [a.primal if isinstance(a, Dual) else a for a in args]
    tangents = [a.tangent if isinstance(a, Dual) else None for a in args]
    out = apply(prim.name, *primals, **attrs)
    if all(t is None for t in tangents):
        return out
    k = next(_shape(t)[0] for t in tangents if t is not None)
    tan = prim.jvp(primals, tangents, out, k=k, **attrs)
    return Dual(out, tan)


def _lift(t, ndim):
    """Insert size-1 axes after the tangent axis so that ``t.ndim == ndim + 1``."""
    if t is None:
        return None
    missing = ndim + 1 - len(_shape(t))
    if missing <= 0:
        return t
    s = _shape(t)
    return reshape(t, (s[0],) + (1,) * missing + tuple(s[1:]))


def _full(t, k, shape):
    return broadcast_to(_lift(t, len(shape)), (k,) + tuple(shape))


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _tangent_axis(axis, ndim):
    if axis is None:
        return tuple(range(1, ndim + 1))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple((a % ndim) + 1 for a in axis)


# elementwise binary ----------------------------------------------------------

def _binary_jvp(rule):
    def jvp(primals, tangents, out, k):
        nd = len(_shape(value_of(out)))
        ta, tb = (_lift(t, nd) for t in tangents)
        return rule(primals[0], primals[1], ta, tb, out)
    return jvp


_defprim(
    "add", np.add,
    lambda g, v, out: (_unbroadcast(g, _shape(v[0])), _unbroadcast(g, _shape(v[1]))),
    _binary_jvp(lambda a, b, ta, tb, out: _tadd(ta, tb)),
)
_defprim(
    "sub", np.subtract,
    lambda g, v, out: (_unbroadcast(g, _shape(v[0])), _unbroadcast(-g, _shape(v[1]))),
    _binary_jvp(lambda a, b, ta, tb, out: _tadd(ta, None if tb is None else neg(tb))),
)
_defprim(
    "mul", np.multiply,
    lambda g, v, out: (_unbroadcast(g * v[1], _shape(v[0])),
                       _unbroadcast(g * v[0], _shape(v[1]))),
    _binary_jvp(lambda a, b, ta, tb, out: _tadd(
        None if ta is None else mul(ta, b), None if tb is None else mul(a, tb))),
)
_defprim(
    "div", np.divide,
    lambda g, v, out: (_unbroadcast(g / v[1], _shape(v[0])),
                       _unbroadcast(-g * out / v[1], _shape(v[1]))),
    _binary_jvp(lambda a, b, ta, tb, out: div(
        _tadd(ta, None if tb is None else neg(mul(tb, out))), b)),
)

# elementwise unary -----------------------------------------------------------

_defprim(
    "neg", np.negative,
    lambda g, v, out: (-g,),
    lambda p, t, out, k: neg(t[0]),
)


def _pow_forward(a, p):
    return np.power(a, p)


_defprim(
    "pow", _pow_forward,
    lambda g, v, out, p: (g * p * np.power(v[0], p - 1),),
    lambda pr, t, out, k, p: mul(t[0], mul(p, power(pr[0], p - 1))),
)
_defprim(
    "tanh", np.tanh,
    lambda g, v, out: (g * (1.0 - out * out),),
    lambda p, t, out, k: mul(t[0], sub(1.0, mul(out, out))),
)
_defprim(
    "exp", np.exp,
    lambda g, v, out: (g * out,),
    lambda p, t, out, k: mul(t[0], out),
)
_defprim(
    "log", np.log,
    lambda g, v, out: (g / v[0],),
    lambda p, t, out, k: div(t[0], p[0]),
)

# linear algebra --------------------------------------------------------------


def _matmul_forward(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one large GEMM instead of a batched loop
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def _matmul_vjp(g, v, out):
    a, b = np.asarray(v[0]), np.asarray(v[1])
    if b.ndim == 2:
        ga = _matmul_forward(g, b.T)
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return _unbroadcast(ga, a.shape), gb
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _matmul_jvp(p, t, out, k):
    nd = len(_shape(value_of(out)))
    ta, tb = _lift(t[0], nd), _lift(t[1], nd)
    return _tadd(None if ta is None else matmul(ta, p[1]),
                 None if tb is None else matmul(p[0], tb))


_defprim("matmul", _matmul_forward, _matmul_vjp, _matmul_jvp)


def _trace_forward(a):
    return np.trace(a, axis1=-2, axis2=-1)


def _trace_vjp(g, v, out):
    n = _shape(v[0])[-1]
    return (np.asarray(g)[..., None, None] * np.eye(n),)


_defprim(
    "trace", _trace_forward, _trace_vjp,
    lambda p, t, out, k: trace(_lift(t[0], len(_shape(value_of(p[0]))))),
)

# reductions and shape ----------------------------------------------------------


def _sum_forward(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    g = np.asarray(g)
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


_defprim(
    "sum", _sum_forward,
    lambda g, v, out, axis=None, keepdims=False:
        (_expand_reduced(g, _shape(v[0]), axis, keepdims),),
    lambda p, t, out, k, axis=None, keepdims=False: sum(
        _full(t[0], k, _shape(value_of(p[0]))),
        axis=_tangent_axis(axis, len(_shape(value_of(p[0])))), keepdims=keepdims),
)


def _sqnorm_forward(a, axis=None):
    a = np.asarray(a)
    return np.sum(a * a, axis=axis)


_defprim(
    "sqnorm", _sqnorm_forward,
    lambda g, v, out, axis=None: (2.0 * np.asarray(v[0]) * _expand_reduced(
        g, _shape(v[0]), axis, False),),
    lambda p, t, out, k, axis=None: mul(2.0, sum(
        mul(_lift(t[0], len(_shape(value_of(p[0])))), p[0]),
        axis=_tangent_axis(axis, len(_shape(value_of(p[0])))))),
)

_defprim(
    "reshape", lambda a, shape: np.reshape(a, shape),
    lambda g, v, out, shape: (np.reshape(g, _shape(v[0])),),
    lambda p, t, out, k, shape: reshape(
        _full(t[0], k, _shape(value_of(p[0]))), (k,) + tuple(_shape(value_of(out)))),
)


def _transpose_vjp(g, v, out, axes):
    return (np.transpose(g, np.argsort(axes)),)


_defprim(
    "transpose", lambda a, axes: np.transpose(a, axes),
    _transpose_vjp,
    lambda p, t, out, k, axes: transpose(
        _lift(t[0], len(axes)), (0,) + tuple(a + 1 for a in axes)),
)


def _getitem_vjp(g, v, out, idx):
    z = np.zeros(_shape(v[0]))
    z[idx] += g
    return (z,)


_defprim(
    "getitem", lambda a, idx: np.asarray(a)[idx],
    _getitem_vjp,
    lambda p, t, out, k, idx: getitem(
        _full(t[0], k, _shape(value_of(p[0]))), (slice(None),) + idx),
)


def _concat_forward(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, v, out, axis):
    sizes = [_shape(a)[axis] for a in v]
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _concat_jvp(p, t, out, k, axis):
    full = []
    for x, tx in zip(p, t):
        shape = (k,) + _shape(value_of(x))
        full.append(np.zeros(shape) if tx is None else broadcast_to(tx, shape))
    ndim = len(_shape(value_of(out)))
    return concat(full, axis=(axis % ndim) + 1)


_defprim("concat", _concat_forward, _concat_vjp, _concat_jvp)

_defprim(
    "broadcast_to", lambda a, shape: np.broadcast_to(a, shape),
    lambda g, v, out, shape: (_unbroadcast(g, _shape(v[0])),),
    lambda p, t, out, k, shape: broadcast_to(
        _lift(t[0], len(_shape(value_of(p[0])))), (k,) + tuple(shape)),
)


# ---------------------------------------------------------------------------
# public op functions


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def div(a, b):
    return apply("div", a, b)


def neg(a):
    return apply("neg", a)


def power(a, p):
    if isinstance(p, (Tensor, Dual)):
        raise UnsupportedPrimitiveError("pow with traced exponent")
    return apply("pow", a, p=float(p))


def tanh(a):
    return apply("tanh", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def matmul(a, b):
    return apply("matmul", a, b)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    shape = np.shape(value_of(a))
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(int(s) for s in shape))


def transpose(a, axes):
    return apply("transpose", a, axes=tuple(int(x) for x in axes))


def getitem(a, idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer))):
            raise UnsupportedPrimitiveError("advanced indexing")
    return apply("getitem", a, idx=idx)


def concat(arrays, axis=-1):
    return apply("concat", *arrays, axis=int(axis))


def sqnorm(a, axis=None):
    """Sum of squares over ``axis`` (all axes when None)."""
    return apply("sqnorm", a, axis=axis)


def trace(a):
    """Trace over the last two axes."""
    return apply("trace", a)


def broadcast_to(a, shape):
    if _shape(value_of(a)) == tuple(shape) and not isinstance(a, Dual):
        return a
    return apply("broadcast_to", a, shape=tuple(int(s) for s in shape))


# ---------------------------------------------------------------------------
# pytrees and drivers


def tree_flatten(obj):
    """Flatten nested lists/tuples/dicts (and objects exposing ``tree_flatten``).

    Returns ``(leaves, rebuild)`` where ``rebuild(new_leaves)`` restores the
    original structure.
    """
    if hasattr(obj, "tree_flatten") and not isinstance(obj, type):
        children, aux = obj.tree_flatten()
        leaves, rebuild_children = tree_flatten(list(children))
        cls = type(obj)
        return leaves, lambda new: cls.tree_unflatten(aux, rebuild_children(new))
    if isinstance(obj, (list, tuple)):
        parts = [tree_flatten(x) for x in obj]
        counts = [len(p[0]) for p in parts]
        leaves = [leaf for p in parts for leaf in p[0]]
        kind = type(obj)

        def rebuild(new):
            out, pos = [], 0
            for (_, rb), n in zip(parts, counts):
                out.append(rb(new[pos:pos + n]))
                pos += n
            return kind(out) if kind in (list, tuple) else kind(*out)
        return leaves, rebuild
    if isinstance(obj, dict):
        keys = list(obj)
        leaves, rb = tree_flatten([obj[k] for k in keys])
        return leaves, lambda new: dict(zip(keys, rb(new)))
    return [obj], lambda new: new[0]


def value_and_grad(objective: Callable, params):
    """Evaluate a scalar ``objective(params)`` and its gradient."""
    leaves, rebuild = tree_flatten(params)
    tr = Trace()
    tensors = [tr.leaf(x) for x in leaves]
    out = objective(rebuild(tensors))
    if isinstance(out, Dual):
        raise AutodiffError("objective returned a Dual; take its primal first")
    if not isinstance(out, Tensor):
        v = np.asarray(out, dtype=np.float64)
        if v.size != 1:
            raise AutodiffError(f"objective must be scalar, got shape {v.shape}")
        return float(v), rebuild([np.zeros_like(t.value) for t in tensors])
    if out.value.size != 1:
        raise AutodiffError(f"objective must be scalar, got shape {out.value.shape}")
    grads = tr.backward(out, tensors)
    tr.release()
    return float(out.value.reshape(())), rebuild(grads)


def grad(objective: Callable, params):
    """Gradient of a scalar objective, with the same structure as ``params``."""
    return value_and_grad(objective, params)[1]


def value_and_jacobian(fn: Callable, x):
    """Return ``fn(x)`` and its input Jacobian.

    ``x`` has shape ``(..., n)``; ``fn`` maps it row-wise to ``(..., m)``.
    The Jacobian has shape ``(..., m, n)`` and stays on the caller's trace,
    so it can be differentiated further with respect to anything ``fn``
    closes over.
    """
    xv = value_of(x)
    shape = np.shape(xv)
    if len(shape) < 1:
        raise AutodiffError("jacobian input must be at least 1-D")
    n = shape[-1]
    seed = np.eye(n).reshape((n,) + (1,) * (len(shape) - 1) + (n,))
    out = fn(Dual(x, seed))
    if not isinstance(out, Dual):
        ov = np.shape(value_of(out))
        if len(ov) != len(shape) or ov[:-1] != shape[:-1]:
            raise AutodiffError(f"vector function changed batch shape: {shape} -> {ov}")
        return out, np.zeros(ov + (n,))
    primal = out.primal
    ov = np.shape(value_of(primal))
    if len(ov) != len(shape) or ov[:-1] != shape[:-1]:
        raise AutodiffError(f"vector function changed batch shape: {shape} -> {ov}")
    if out.tangent is None:
        return primal, np.zeros(ov + (n,))
    t = _full(_lift(out.tangent, len(ov)), n, ov)
    jac = transpose(t, tuple(range(1, len(ov) + 1)) + (0,))
    return primal, jac


def jacobian(fn: Callable, x):
    """Input Jacobian of a row-wise vector function; see :func:`value_and_jacobian`."""
    return value_and_jacobian(fn, x)[1]
