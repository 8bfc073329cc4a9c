"""Minimal reverse-mode differentiation over dense float64 arrays.

Every primitive computes its forward value with numpy and, when at least one
input requires a gradient, records a node holding a vector-Jacobian product.
Nodes carry a global sequence number, so sorting the nodes reachable from an
objective by that number yields a topological order (inputs always precede the
nodes that consume them).

Broadcasting is restricted to scalar-tensor pairs.  Anything else has to be
spelled out, usually with :func:`einsum`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.special

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "record",
    "backward",
    "grad",
    "check_gradient",
    "as_tensor",
    "custom",
    "PRIMITIVES",
]

_seq = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""


class _Node:
    __slots__ = ("op", "parents", "vjp", "seq")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "_node", "grad", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.grad: np.ndarray | None = None

    @classmethod
    def _from_op(cls, value: np.ndarray, node: _Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = value
        t.requires_grad = node is not None
        t._node = node
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __pow__(self, k):
        if k == 2:
            return mul(self, self)
        if k == 0.5:
            return sqrt(self)
        raise NotImplementedError("only squares and square roots are supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _make(op: str, value, inputs: Sequence, vjps: Sequence[Callable | None]) -> Tensor:
    """Wrap ``value``; record a node if any differentiable input is present.

    ``vjps[i]`` maps the output cotangent to the cotangent of ``inputs[i]``.
    """
    value = np.asarray(value, dtype=np.float64)
    parents = []
    fns = []
    for x, fn in zip(inputs, vjps):
        if _needs(x) and fn is not None:
            parents.append(x)
            fns.append(fn)
    if not parents:
        return Tensor._from_op(value, None)

    def vjp(g):
        return [fn(g) for fn in fns]

    return Tensor._from_op(value, _Node(op, tuple(parents), vjp))


def custom(op: str, value, inputs: Sequence, vjps: Sequence[Callable | None]) -> Tensor:
    """Record a primitive defined outside this module (SDF lookups, SO(3) log)."""
    return _make(op, value, inputs, vjps)


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only scalar-tensor broadcasting is allowed)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _binary_shapes("add", av, bv)
    return _make("add", av + bv, (a, b),
                 (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _binary_shapes("sub", av, bv)
    return _make("sub", av - bv, (a, b),
                 (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)))


def neg(a) -> Tensor:
    return _make("neg", -_val(a), (a,), (lambda g: -g,))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _binary_shapes("mul", av, bv)
    return _make("mul", av * bv, (a, b),
                 (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _binary_shapes("div", av, bv)
    out = av / bv
    return _make("div", out, (a, b),
                 (lambda g: _unbroadcast(g / bv, av.shape),
                  lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def log(a) -> Tensor:
    av = _val(a)
    return _make("log", np.log(av), (a,), (lambda g: g / av,))


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _make("exp", out, (a,), (lambda g: g * out,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_val(a))
    return _make("sqrt", out, (a,), (lambda g: g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    out = scipy.special.expit(_val(a))
    return _make("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def sin(a) -> Tensor:
    av = _val(a)
    return _make("sin", np.sin(av), (a,), (lambda g: g * np.cos(av),))


def cos(a) -> Tensor:
    av = _val(a)
    return _make("cos", np.cos(av), (a,), (lambda g: -g * np.sin(av),))


def relu(a) -> Tensor:
    """``max(a, 0)``; the derivative at exactly zero is taken as zero."""
    av = _val(a)
    mask = av > 0.0
    return _make("relu", np.where(mask, av, 0.0), (a,), (lambda g: g * mask,))


def clip(a, lower, upper) -> Tensor:
    av = _val(a)
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    inside = (av > lo) & (av < hi)
    return _make("clip", np.clip(av, lo, hi), (a,), (lambda g: g * inside,))


def asinh(a) -> Tensor:
    av = _val(a)
    return _make("asinh", np.arcsinh(av), (a,), (lambda g: g / np.sqrt(av * av + 1.0),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(a, axis=None) -> Tensor:
    av = _val(a)
    out = np.sum(av, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), av.shape).copy()

    return _make("sum", out, (a,), (vjp,))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the cotangent at a zero vector is zero."""
    av = _val(a)
    out = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return np.expand_dims(scale, axis) * av

    return _make("norm", out, (a,), (vjp,))


def reshape(a, shape) -> Tensor:
    av = _val(a)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {av.shape} into {tuple(shape)}") from exc
    return _make("reshape", out, (a,), (lambda g: g.reshape(av.shape),))


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), (lambda g: np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx) -> Tensor:
    av = _val(a)
    out = av[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros_like(av)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return z

    return _make("slice", np.array(out, dtype=np.float64), (a,), (vjp,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return _make("concat", out, tensors, [piece(k) for k in range(len(vals))])


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[v.shape for v in vals]}") from exc

    def piece(k):
        return lambda g: np.take(g, k, axis=axis)

    return _make("stack", out, tensors, [piece(k) for k in range(len(vals))])


def scatter_add(values, index: np.ndarray, size: int) -> Tensor:
    """Flat ``out[index[i]] += values.ravel()[i]`` into a zero vector of ``size``."""
    vv = _val(values)
    index = np.asarray(index)
    if index.shape != vv.shape:
        raise ShapeError(f"scatter_add: index shape {index.shape} != values shape {vv.shape}")
    out = np.bincount(index.ravel(), weights=vv.ravel(), minlength=size)
    if out.size != size:
        raise ShapeError(f"scatter_add: index out of range for size {size}")
    return _make("scatter_add", out, (values,), (lambda g: g[index],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def va(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T

    def vb(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g) if bv.ndim == 2 else g * av
        return av.T @ g

    return _make("matmul", out, (a, b), (va, vb))


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum, e.g. ``einsum("tij,tj->ti", R, p)``."""
    if "->" not in subscripts:
        raise ShapeError("einsum: output subscripts must be explicit")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    subs = lhs.split(",")
    vals = [_val(o) for o in operands]
    if len(subs) != len(vals):
        raise ShapeError(f"einsum: {len(subs)} subscripts for {len(vals)} operands")
    for s, v in zip(subs, vals):
        if len(s) != v.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum: subscript '{s}' does not fit operand of shape {v.shape}")
    try:
        out = np.einsum(subscripts, *vals, optimize=len(vals) > 2)
    except ValueError as exc:
        raise ShapeError(f"einsum '{subscripts}': {exc} (shapes {[v.shape for v in vals]})") from exc

    def make_vjp(k):
        target = subs[k]
        others = [s for i, s in enumerate(subs) if i != k]
        other_vals = [v for i, v in enumerate(vals) if i != k]
        present = set(out_sub).union(*others) if others else set(out_sub)
        kept = "".join(c for c in target if c in present)

        def vjp(g):
            spec = ",".join([out_sub] + others) + "->" + kept
            r = np.einsum(spec, g, *other_vals, optimize=len(other_vals) > 1)
            if kept != target:
                shape = [vals[k].shape[i] if c in kept else 1 for i, c in enumerate(target)]
                r = np.broadcast_to(r.reshape(shape), vals[k].shape).copy()
            return r

        return vjp

    return _make("einsum", out, operands, [make_vjp(k) for k in range(len(vals))])


def cross(a, b) -> Tensor:
    """Cross product along the last axis; shapes must match exactly."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape or av.shape[-1] != 3:
        raise ShapeError(f"cross: incompatible shapes {av.shape} and {bv.shape}")
    return _make("cross", np.cross(av, bv), (a, b),
                 (lambda g: np.cross(bv, g), lambda g: np.cross(g, av)))


def _band_indices(n: int, u: int):
    i, j = np.triu_indices(n)
    keep = (j - i) <= u
    i, j = i[keep], j[keep]
    return i, j, u + i - j


def solve(A, b, bandwidth: int | None = None) -> Tensor:
    """Solve ``A x = b`` and record the adjoint rule directly.

    With ``bandwidth`` set, ``A`` is treated as symmetric positive definite
    with that half-bandwidth and solved by banded Cholesky.  The adjoint is
    ``b_bar = A^-T x_bar`` and ``A_bar = -b_bar x^T``.
    """
    Av, bv = _val(A), _val(b)
    if Av.ndim != 2 or Av.shape[0] != Av.shape[1] or bv.shape[0] != Av.shape[0] or bv.ndim > 2:
        raise ShapeError(f"solve: incompatible shapes {Av.shape} and {bv.shape}")
    n = Av.shape[0]
    if bandwidth is None:
        lu = scipy.linalg.lu_factor(Av, check_finite=True)
        x = scipy.linalg.lu_solve(lu, bv)

        def adjoint(g):
            return scipy.linalg.lu_solve(lu, g, trans=1)
    else:
        u = int(min(bandwidth, n - 1))
        i, j, r = _band_indices(n, u)
        ab = np.zeros((u + 1, n))
        ab[r, j] = Av[i, j]
        c = scipy.linalg.cholesky_banded(ab, lower=False)
        x = scipy.linalg.cho_solve_banded((c, False), bv)

        def adjoint(g):
            return scipy.linalg.cho_solve_banded((c, False), g)

    cache = {}

    def bbar(g):
        if "b" not in cache:
            cache["b"] = adjoint(g)
        return cache["b"]

    def va(g):
        bb = bbar(g)
        return -(np.multiply.outer(bb, x) if bv.ndim == 1 else bb @ x.T)

    return _make("solve", x, (A, b), (va, bbar))


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "neg": neg, "mul": mul, "div": div,
    "matmul": matmul, "einsum": einsum, "solve": solve, "sum": sum_,
    "log": log, "exp": exp, "sqrt": sqrt, "sigmoid": sigmoid, "norm": norm,
    "concat": concat, "stack": stack, "slice": getitem, "reshape": reshape,
    "transpose": transpose, "sin": sin, "cos": cos, "relu": relu, "clip": clip,
    "cross": cross, "scatter_add": scatter_add, "asinh": asinh,
}

_LIST_INPUT = {"concat", "stack"}


def record(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the primitive named ``op`` to ``inputs``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive '{op}'") from None
    if op in _LIST_INPUT:
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Nodes reachable from one objective, in topological order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @property
    def nodes(self) -> list[_Node]:
        return [t._node for t in self.tensors]

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack_ = [output]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack_.extend(t._node.parents)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self):
        return len(self.tensors)

    def run(self, output: Tensor, seed: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Propagate ``seed`` backwards; returns ``{id(leaf): (leaf, grad)}``."""
        cot: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        if output._node is None:
            if output.requires_grad:
                leaves[id(output)] = (output, seed)
            return leaves
        for t in reversed(self.tensors):
            g = cot.pop(id(t), None)
            if g is None:
                continue
            for parent, pg in zip(t._node.parents, t._node.vjp(g)):
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.data.shape:
                    pg = pg.reshape(parent.data.shape)
                if parent._node is None:
                    key = id(parent)
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + pg)
                    else:
                        leaves[key] = (parent, pg)
                else:
                    key = id(parent)
                    cot[key] = cot[key] + pg if key in cot else pg
        return leaves


def backward(objective: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar objective for every reachable leaf.

    Leaves also receive the result in ``leaf.grad``.  Leaves that are not
    connected to the objective are simply absent (their gradient is zero).
    """
    if not isinstance(objective, Tensor) or objective.data.size != 1:
        shape = objective.shape if isinstance(objective, Tensor) else type(objective)
        raise ValueError(f"backward: objective must be a scalar tensor, got {shape}")
    seed = np.ones_like(objective.data)
    leaves = Tape.from_output(objective).run(objective, seed)
    out = {}
    for leaf, g in leaves.values():
        leaf.grad = g
        out[leaf] = g
    return out


def grad(objective: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    grads = backward(objective)
    return [grads.get(w, np.zeros_like(w.data)) for w in wrt]


def check_gradient(f: Callable[[Tensor], Tensor], x, step: float = 1e-6) -> float:
    """Max relative error between the reverse-mode and central-difference gradients.

    The error for coordinate ``i`` is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x0 = np.array(_val(x), dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(_val(y))):
        raise ValueError("check_gradient: f is not finite at x")
    (analytic,) = grad(y, [xt])
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(_val(f(Tensor(xp.reshape(x0.shape)))))
        fm = float(_val(f(Tensor(xm.reshape(x0.shape)))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"check_gradient: f is not finite at x +/- step*e_{i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
