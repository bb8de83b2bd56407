"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs live on it. Tensors that
are not attached to a tape are constants: operations on them run eagerly and
record nothing, which is the fast path used by rollouts that need no
gradients.

    tape = Tape()
    x = tape.variable([1.0, 2.0])
    y = (x * x).sum()
    grads = backward(tape, y)
    grads[x.node].value  # -> [2., 4.]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "GradCheckReport",
    "OpRecord",
    "Tape",
    "Tensor",
    "apply",
    "backward",
    "grad",
    "grad_check",
    "as_tensor",
    "OP_KINDS",
    "register_op",
]


class AutodiffError(ValueError):
    """Raised on shape mismatches, invalid domains or non-finite values."""


def _to_array(value: Any) -> np.ndarray:
    if type(value) is np.ndarray and value.dtype == np.float64:
        return value
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Immutable float64 array, optionally bound to a node on a tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, value: Any, tape: "Tape | None" = None, node: int | None = None,
                 check: bool = True):
        arr = _to_array(value)
        if check and not np.isfinite(arr).all():
            raise AutodiffError("tensor values must be finite (got NaN or Inf)")
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other): return apply("add", self, other)
    def __radd__(self, other): return apply("add", other, self)
    def __sub__(self, other): return apply("sub", self, other)
    def __rsub__(self, other): return apply("sub", other, self)
    def __mul__(self, other): return apply("mul", self, other)
    def __rmul__(self, other): return apply("mul", other, self)
    def __truediv__(self, other): return apply("div", self, other)
    def __rtruediv__(self, other): return apply("div", other, self)
    def __matmul__(self, other): return apply("matmul", self, other)
    def __rmatmul__(self, other): return apply("matmul", other, self)
    def __neg__(self): return apply("neg", self)
    def __getitem__(self, index): return apply("slice", self, index=index)

    @property
    def T(self) -> "Tensor":
        return apply("transpose", self)

    def sum(self, axis=None, keepdims=False): return apply("sum", self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return apply("mean", self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)
    def transpose(self, *axes): return apply("transpose", self, axes=axes or None)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    saved: Any = None
    vjp: Callable | None = None


@dataclass
class Tape:
    """Ordered record of operations; single-owner, never shared between threads."""

    records: list[OpRecord] = field(default_factory=list)
    recording: bool = True

    def __len__(self) -> int:
        return len(self.records)

    def variable(self, value: Any) -> Tensor:
        """Create a leaf tensor whose gradient will be reported by backward."""
        node = len(self.records)
        t = Tensor(value, self, node)
        self.records.append(OpRecord("leaf", (), node, t.shape, None))
        return t

    def _push(self, kind, inputs, out_value, vjp) -> Tensor:
        node = len(self.records)
        t = Tensor(out_value, self, node, check=False)
        self.records.append(OpRecord(kind, inputs, node, None, vjp))
        return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _broadcast_op(kind, fn, a, b):
    try:
        return fn(a, b)
    except ValueError:
        raise AutodiffError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Each op kind: forward(values, **attrs) -> (out, ctx); vjp(g, values, out, ctx, **attrs) -> grads.

def _fwd_add(a, b):
    return _broadcast_op("add", np.add, a, b), None


def _vjp_add(g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _fwd_sub(a, b):
    return _broadcast_op("sub", np.subtract, a, b), None


def _vjp_sub(g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _fwd_mul(a, b):
    return _broadcast_op("mul", np.multiply, a, b), None


def _vjp_mul(g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_div(a, b):
    if not b.all():
        raise AutodiffError("div: division by zero")
    return _broadcast_op("div", np.divide, a, b), None


def _vjp_div(g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _fwd_matmul(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise AutodiffError(f"matmul: scalar operands not allowed, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise AutodiffError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        return np.matmul(a, b), None
    except ValueError:
        raise AutodiffError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None


def _vjp_matmul(g, vals, out, ctx):
    a, b = vals
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    if a.ndim == 1:
        ga = _unbroadcast(ga, (1,) * (ga.ndim - 2) + a2.shape).reshape(a.shape) if ga.ndim > 2 else ga.reshape(a.shape)
    else:
        ga = _unbroadcast(ga, a.shape)
    if b.ndim == 1:
        gb = _unbroadcast(gb, (1,) * (gb.ndim - 2) + b2.shape).reshape(b.shape) if gb.ndim > 2 else gb.reshape(b.shape)
    else:
        gb = _unbroadcast(gb, b.shape)
    return ga, gb


def _fwd_neg(a):
    return -a, None


def _vjp_neg(g, vals, out, ctx):
    return (-g,)


def _fwd_tanh(a):
    return np.tanh(a), None


def _vjp_tanh(g, vals, out, ctx):
    return (g * (1.0 - out * out),)


def _fwd_sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0), None


def _vjp_sigmoid(g, vals, out, ctx):
    return (g * out * (1.0 - out),)


def _fwd_relu(a):
    return np.maximum(a, 0.0), None


def _vjp_relu(g, vals, out, ctx):
    return (g * (vals[0] > 0.0),)


def _fwd_exp(a):
    if a.size and a.max() > 700.0:
        raise AutodiffError("exp: overflow")
    return np.exp(a), None


def _vjp_exp(g, vals, out, ctx):
    return (g * out,)


def _fwd_log(a):
    if np.any(a <= 0.0):
        raise AutodiffError("log: argument must be strictly positive")
    return np.log(a), None


def _vjp_log(g, vals, out, ctx):
    return (g / vals[0],)


def _fwd_square(a):
    return a * a, None


def _vjp_square(g, vals, out, ctx):
    return (2.0 * g * vals[0],)


def _fwd_sqrt(a):
    if np.any(a < 0.0):
        raise AutodiffError("sqrt: argument must be non-negative")
    return np.sqrt(a), None


def _vjp_sqrt(g, vals, out, ctx):
    # zero subgradient at the origin keeps distance-like graphs finite
    safe = np.where(out > 0.0, out, 1.0)
    return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)


def _fwd_abs(a):
    return np.abs(a), None


def _vjp_abs(g, vals, out, ctx):
    return (g * np.sign(vals[0]),)


def _fwd_sin(a):
    return np.sin(a), None


def _vjp_sin(g, vals, out, ctx):
    return (g * np.cos(vals[0]),)


def _fwd_cos(a):
    return np.cos(a), None


def _vjp_cos(g, vals, out, ctx):
    return (-g * np.sin(vals[0]),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _fwd_sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _vjp_sum(g, vals, out, ctx, axis=None, keepdims=False):
    a = vals[0]
    if not keepdims:
        for ax in sorted(_norm_axis(axis, a.ndim)):
            g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, a.shape).copy(),)


def _fwd_mean(a, axis=None, keepdims=False):
    if a.size == 0:
        raise AutodiffError("mean: empty tensor")
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _vjp_mean(g, vals, out, ctx, axis=None, keepdims=False):
    a = vals[0]
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return (np.broadcast_to(g / count, a.shape).copy(),)


def _fwd_concat(*vals, axis=0):
    try:
        return np.concatenate(vals, axis=axis), None
    except ValueError:
        shapes = [v.shape for v in vals]
        raise AutodiffError(f"concat: shapes {shapes} do not conform on axis {axis}") from None


def _vjp_concat(g, vals, out, ctx, axis=0):
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _fwd_stack(*vals, axis=0):
    try:
        return np.stack(vals, axis=axis), None
    except ValueError:
        shapes = [v.shape for v in vals]
        raise AutodiffError(f"stack: shapes {shapes} differ") from None


def _vjp_stack(g, vals, out, ctx, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))


def _fwd_slice(a, index=None):
    try:
        return a[index], None
    except IndexError as exc:
        raise AutodiffError(f"slice: {exc} for shape {a.shape}") from None


def _vjp_slice(g, vals, out, ctx, index=None):
    a = vals[0]
    full = np.zeros(a.shape)
    if _is_basic(index):
        full[index] += g
    else:
        np.add.at(full, index, g)
    return (full,)


def _is_basic(index) -> bool:
    """Basic indices never repeat an element, so a plain add is safe."""
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def _fwd_reshape(a, shape=()):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise AutodiffError(f"reshape: cannot reshape {a.shape} to {shape}") from None


def _vjp_reshape(g, vals, out, ctx, shape=()):
    return (g.reshape(vals[0].shape),)


def _fwd_transpose(a, axes=None):
    return np.transpose(a, axes), None


def _vjp_transpose(g, vals, out, ctx, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _fwd_broadcast(a, shape=()):
    try:
        return np.broadcast_to(a, shape).copy(), None
    except ValueError:
        raise AutodiffError(f"scalar-broadcast: cannot broadcast {a.shape} to {shape}") from None


def _vjp_broadcast(g, vals, out, ctx, shape=()):
    return (_unbroadcast(g, vals[0].shape),)


def _fwd_clamp(a, lo=-np.inf, hi=np.inf):
    return np.clip(a, lo, hi), None


def _vjp_clamp(g, vals, out, ctx, lo=-np.inf, hi=np.inf):
    a = vals[0]
    # pass-through inside, zero outside; value exactly on a bound counts as inside
    return (g * ((a >= lo) & (a <= hi)),)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, _vjp_add),
    "sub": (_fwd_sub, _vjp_sub),
    "mul": (_fwd_mul, _vjp_mul),
    "div": (_fwd_div, _vjp_div),
    "matmul": (_fwd_matmul, _vjp_matmul),
    "neg": (_fwd_neg, _vjp_neg),
    "tanh": (_fwd_tanh, _vjp_tanh),
    "sigmoid": (_fwd_sigmoid, _vjp_sigmoid),
    "relu": (_fwd_relu, _vjp_relu),
    "exp": (_fwd_exp, _vjp_exp),
    "log": (_fwd_log, _vjp_log),
    "square": (_fwd_square, _vjp_square),
    "sqrt": (_fwd_sqrt, _vjp_sqrt),
    "abs": (_fwd_abs, _vjp_abs),
    "sin": (_fwd_sin, _vjp_sin),
    "cos": (_fwd_cos, _vjp_cos),
    "sum": (_fwd_sum, _vjp_sum),
    "mean": (_fwd_mean, _vjp_mean),
    "concat": (_fwd_concat, _vjp_concat),
    "stack": (_fwd_stack, _vjp_stack),
    "slice": (_fwd_slice, _vjp_slice),
    "reshape": (_fwd_reshape, _vjp_reshape),
    "transpose": (_fwd_transpose, _vjp_transpose),
    "scalar-broadcast": (_fwd_broadcast, _vjp_broadcast),
    "clamp": (_fwd_clamp, _vjp_clamp),
}

OP_KINDS = tuple(_OPS)


def register_op(kind: str, fwd: Callable, vjp: Callable) -> None:
    """Add a fused op. ``fwd(*vals, **attrs) -> (out, ctx)``;
    ``vjp(g, vals, out, ctx, **attrs)`` returns one gradient (or None) per input."""
    if kind in _OPS:
        raise AutodiffError(f"op kind {kind!r} already registered")
    _OPS[kind] = (fwd, vjp)


def apply(kind: str, *inputs: Any, **attrs: Any) -> Tensor:
    """Evaluate op ``kind`` on ``inputs``; record it when any input is on a tape."""
    try:
        fwd, vjp = _OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {kind!r}") from None
    tape = None
    vals = []
    nodes = []
    for x in inputs:
        if isinstance(x, Tensor):
            if x.tape is not None:
                if tape is None:
                    tape = x.tape
                elif x.tape is not tape:
                    raise AutodiffError(f"{kind}: inputs belong to different tapes")
            vals.append(x.value)
            nodes.append(x.node if x.tape is not None else None)
        else:
            vals.append(_to_array(x))
            nodes.append(None)
    out, ctx = fwd(*vals, **attrs)
    if out.dtype != np.float64:
        out = np.asarray(out, dtype=np.float64)
    # a NaN/Inf anywhere poisons the sum, which is cheaper than isfinite().all()
    if out.size and not math.isfinite(np.add.reduce(out, axis=None)):
        if not np.isfinite(out).all():
            raise AutodiffError(f"{kind}: produced non-finite values")
    if tape is None or not tape.recording:
        return Tensor(out, check=False)
    saved_vals = tuple(vals)

    def _vjp(g, _vals=saved_vals, _out=out, _ctx=ctx, _attrs=attrs):
        return vjp(g, _vals, _out, _ctx, **_attrs)

    return tape._push(kind, tuple(nodes), out, _vjp)


def backward(tape: Tape, output: Tensor) -> dict[int, Tensor]:
    """Reverse accumulation from scalar ``output``; returns node-id -> gradient."""
    if output.tape is not tape:
        raise AutodiffError("backward: output is not recorded on this tape")
    if output.size != 1:
        raise AutodiffError(f"backward: output must be scalar, got shape {output.shape}")
    adj: dict[int, np.ndarray] = {output.node: np.ones(output.shape)}
    records = tape.records
    for rec in reversed(records[: output.node + 1]):
        g = adj.get(rec.output)
        if g is None or rec.vjp is None:
            continue
        grads = rec.vjp(g)
        for node, gi in zip(rec.inputs, grads):
            if node is None or gi is None:
                continue
            prev = adj.get(node)
            adj[node] = gi if prev is None else prev + gi
    out: dict[int, Tensor] = {}
    for rec in records[: output.node + 1]:
        if rec.kind == "leaf":
            g = adj.get(rec.output)
            out[rec.output] = Tensor(g if g is not None else np.zeros(rec.saved), check=False)
    return out


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``output`` with respect to each tensor in ``wrt`` (zeros if unreachable)."""
    tape = output.tape
    if tape is None:
        return [np.zeros(w.shape) for w in wrt]
    adj = backward(tape, output)
    res = []
    for w in wrt:
        g = adj.get(w.node) if w.tape is tape else None
        res.append(np.zeros(w.shape) if g is None else np.array(g.value))
    return res


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    max_rel_error: float
    tol: float
    passed: bool


def grad_check(fn: Callable[[Tensor], Tensor], point: Any, step: float = 1e-5,
               tol: float = 1e-5,
               analytic_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn`` at ``point`` with central differences.

    ``analytic_fn`` overrides the tape gradient; tests use it to feed a known-wrong
    gradient through the same comparison.
    """
    if step <= 0:
        raise AutodiffError("grad_check: step must be positive")
    x0 = np.array(point, dtype=np.float64)
    if analytic_fn is not None:
        analytic = np.asarray(analytic_fn(x0), dtype=np.float64).reshape(x0.shape)
    else:
        tape = Tape()
        x = tape.variable(x0)
        analytic = grad(fn(x), [x])[0]
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(analytic, numeric, rel, worst, tol, worst <= tol)
