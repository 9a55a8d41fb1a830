"""Dense float64 tensors with a reverse-mode tape.

Values live in read-only numpy arrays. Operations record a node on the
active :class:`Tape` whenever at least one input is tracked by it; the
tape's node list is therefore already in topological order and
:func:`backward` walks it in reverse.

Broadcasting: ``add``, ``sub``, ``mul`` and ``atan2`` follow numpy
broadcasting and sum gradients back over broadcast axes. ``matmul``
contracts the last axis of ``a`` with the second-to-last axis of ``b``
(numpy ``@`` semantics, batch axes broadcast).

``backward`` is idempotent: gradients are accumulated into a fresh map on
each call and the tape is never mutated by it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


class Tensor:
    """Immutable array plus an optional link to the tape node that made it."""

    __slots__ = ("value", "_tape", "_node", "name", "__weakref__")

    def __init__(self, value, name: str | None = None):
        self.value = _frozen(value)
        self._tape: Tape | None = None
        self._node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # Operator sugar; every one of these routes through the op registry.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as an untracked constant; float64 arrays are viewed, not copied."""
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.value = np.asarray(x, dtype=np.float64).view()
    t.value.flags.writeable = False
    t._tape = None
    t._node = None
    t.name = None
    return t


@dataclass
class _Node:
    op: str
    inputs: tuple  # node index per input, or None for untracked inputs
    rule: Callable | None  # grad_out -> tuple of input grads (None = no grad)
    shape: tuple
    kink: np.ndarray | None = None


@dataclass
class _SliceGrad:
    """Gradient that is non-zero only on ``index`` of a tensor."""

    index: object
    grad: np.ndarray
    basic: bool


class Tape:
    """Records operations for reverse-mode differentiation.

    Use as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self.last_backward_count = 0

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, t: Tensor | np.ndarray, name: str | None = None) -> Tensor:
        """Register ``t`` as a differentiable leaf on this tape."""
        if not isinstance(t, Tensor):
            t = Tensor(t, name=name)
        elif t._tape is not None and t._tape is not self:
            # Leaves are per tape; re-wrap so another tape's graph is not touched.
            t = Tensor(t.value, name=name or t.name)
        if t._tape is self:
            return t
        t._tape = self
        t._node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t.shape))
        self.leaves.append(t)
        return t

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and t._tape is self

    def kink_signature(self) -> tuple[bytes, ...]:
        """Which side of every kink each element fell on during recording."""
        return tuple(n.kink.tobytes() for n in self.nodes if n.kink is not None)


def _record(op: str, inputs: Sequence, out: np.ndarray, rule, kink=None) -> Tensor:
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        raise NonFiniteError(f"{op}: produced {bad} non-finite value(s)")
    result = Tensor.__new__(Tensor)
    out.flags.writeable = False
    result.value = out
    result._tape = None
    result._node = None
    result.name = None
    tape = _active_tape()
    if tape is None:
        return result
    idx = tuple(t._node if tape.tracks(t) else None for t in inputs)
    if all(i is None for i in idx):
        return result
    result._tape = tape
    result._node = len(tape.nodes)
    tape.nodes.append(_Node(op, idx, rule, out.shape, kink))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# ---------------------------------------------------------------- operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.value + b.value,
                   lambda g, _n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.value - b.value,
                   lambda g, _n: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    def rule(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return _record("mul", (a, b), av * bv, rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape,
                         detail="need (..., n, k) @ (..., k, m)")
    av, bv = a.value, b.value
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes not broadcastable") from None

    def rule(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if needs[1]:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", (a, b), out, rule)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form cannot overflow for large |x|.
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record("sigmoid", (x,), out, lambda g, _n: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _record("tanh", (x,), out, lambda g, _n: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _record("exp", (x,), out, lambda g, _n: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    if np.any(v <= 0):
        raise NonFiniteError("log: non-positive input")
    return _record("log", (x,), np.log(v), lambda g, _n: (g / v,))


def clamp(x, low: float, high: float) -> Tensor:
    """Clip to ``[low, high]``; gradient 1 on the closed interval, 0 outside."""
    if not low <= high:
        raise ValueError(f"clamp: low {low} > high {high}")
    x = as_tensor(x)
    v = x.value
    inside = (v >= low) & (v <= high)
    # 0 interior, 1 below, 2 above, 3 exactly on a bound
    kink = np.where(v < low, 1, np.where(v > high, 2, 0)).astype(np.int8)
    kink[(v == low) | (v == high)] = 3
    return _record("clamp", (x,), np.clip(v, low, high),
                   lambda g, _n: (g * inside,), kink=kink)


def abs_(x) -> Tensor:
    """Absolute value; subgradient 0 at exactly 0."""
    x = as_tensor(x)
    v = x.value
    s = np.sign(v)
    return _record("abs", (x,), np.abs(v), lambda g, _n: (g * s,), kink=s.astype(np.int8))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record("square", (x,), v * v, lambda g, _n: (2.0 * g * v,))


def sqrt(x) -> Tensor:
    """Square root; the infinite derivative at 0 is replaced by 0."""
    x = as_tensor(x)
    v = x.value
    if np.any(v < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(v)
    zero = out == 0

    def rule(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(zero, 0.0, 0.5 / np.where(zero, 1.0, out))
        return (g * d,)

    return _record("sqrt", (x,), out, rule, kink=zero.astype(np.int8))


def atan2(y, x) -> Tensor:
    """Elementwise ``atan2(y, x)``; gradient taken as 0 at the origin."""
    y, x = as_tensor(y), as_tensor(x)
    _broadcast_shape("atan2", y, x)
    yv, xv = y.value, x.value
    out = np.arctan2(yv, xv)

    def rule(g, needs):
        r2 = xv * xv + yv * yv
        safe = np.where(r2 == 0, 1.0, r2)
        gy = np.where(r2 == 0, 0.0, g * xv / safe)
        gx = np.where(r2 == 0, 0.0, -g * yv / safe)
        return _unbroadcast(gy, yv.shape), _unbroadcast(gx, xv.shape)

    return _record("atan2", (y, x), out, rule)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def slice_(x, index) -> Tensor:
    """numpy indexing; advanced (integer-array) indices are supported."""
    x = as_tensor(x)
    try:
        out = np.array(x.value[index], dtype=np.float64)
    except IndexError as err:
        raise ShapeError("slice", x.shape, detail=str(err)) from None
    basic = _is_basic(index)
    return _record("slice", (x,), out, lambda g, _n: (_SliceGrad(index, g, basic),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat", detail="no inputs")
    ndim = xs[0].ndim
    ax = axis % ndim
    for t in xs[1:]:
        same = t.ndim == ndim and all(
            t.shape[i] == xs[0].shape[i] for i in range(ndim) if i != ax)
        if not same:
            raise ShapeError("concat", xs[0].shape, t.shape, detail=f"axis={axis}")
    out = np.concatenate([t.value for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def rule(g, needs):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(lo), int(hi))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record("concat", xs, out, rule)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record("reshape", (x,), out.copy(), lambda g, _n: (g.reshape(old),))


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    return _record("reduce_sum", (x,), np.asarray(out, dtype=np.float64),
                   lambda g, _n: (_expand(g, shape, axis, keepdims),))


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.mean(x.value, axis=axis, keepdims=keepdims)
    count = x.value.size / max(np.size(out), 1)
    return _record("reduce_mean", (x,), np.asarray(out, dtype=np.float64),
                   lambda g, _n: (_expand(g, shape, axis, keepdims) / count,))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "clamp": clamp,
    "abs": abs_,
    "atan2": atan2,
    "slice": slice_,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "reshape": reshape,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "square": square,
    "sqrt": sqrt,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[op]
    except KeyError:
        raise TapeError(f"unknown op {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def backward(root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every watched leaf.

    Leaves that do not feed into ``root`` get a zero gradient.
    """
    tape = root._tape
    if tape is None:
        raise TapeError("root was not produced under a tape")
    if root.value.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {root._node: np.ones(root.shape)}
    owned: set[int] = set()
    applied = 0
    for i in range(root._node, -1, -1):
        g = grads.pop(i, None) if nodes[i].op != "leaf" else grads.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.rule is None:
            continue
        applied += 1
        needs = tuple(src is not None for src in node.inputs)
        for src, gin in zip(node.inputs, node.rule(g, needs)):
            if src is None or gin is None:
                continue
            if isinstance(gin, _SliceGrad):
                acc = grads.get(src)
                if acc is None:
                    acc = grads[src] = np.zeros(nodes[src].shape)
                    owned.add(src)
                elif src not in owned:
                    acc = grads[src] = np.array(acc, dtype=np.float64)
                    owned.add(src)
                if gin.basic:
                    acc[gin.index] += gin.grad
                else:
                    np.add.at(acc, gin.index, gin.grad)
                continue
            acc = grads.get(src)
            # Never add in place: gin may alias another node's gradient.
            if acc is None:
                grads[src] = gin
            else:
                grads[src] = acc + gin
                owned.add(src)
    tape.last_backward_count = applied
    leaves = tape.leaves if wrt is None else wrt
    out = {}
    for leaf in leaves:
        g = grads.get(leaf._node) if leaf._tape is tape else None
        out[leaf] = g if g is not None else np.zeros(leaf.shape)
    return out


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    excluded: list[tuple[str, tuple]] = field(default_factory=list)
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               step: float = 1e-5, tolerance: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare taped gradients of ``f`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. An element is
    excluded when either probe lands on a different side of a kink
    (clamp bound, abs or sqrt at zero) than the base point, since central
    differences are meaningless there.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        with Tape() as tape:
            leaves = {k: tape.watch(v, name=k) for k, v in values.items()}
            out = f(leaves)
        return out, tape, leaves

    root, tape, leaves = evaluate(params)
    analytic = backward(root, wrt=list(leaves.values()))
    base_sig = tape.kink_signature()

    report = GradCheckReport(step=step, tolerance=tolerance)
    for name, value in params.items():
        grad = analytic[leaves[name]]
        worst = 0.0
        n_checked = 0
        for idx in np.ndindex(value.shape):
            probes = []
            sigs = []
            for sign in (1.0, -1.0):
                moved = dict(params)
                arr = value.copy()
                arr[idx] += sign * step
                moved[name] = arr
                out, t, _ = evaluate(moved)
                probes.append(out.item())
                sigs.append(t.kink_signature())
            if sigs[0] != base_sig or sigs[1] != base_sig:
                report.excluded.append((name, idx))
                continue
            numeric = (probes[0] - probes[1]) / (2.0 * step)
            a = float(grad[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            n_checked += 1
            if rel >= tolerance:
                report.failures.append((name, idx, a, numeric))
        report.max_rel_error[name] = worst
        report.checked[name] = n_checked
    return report
