"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is a dynamic tape: every operation executed while gradients are
enabled records a node carrying its parents and a vector-Jacobian closure.
Creation order is topological order, so a single reverse sweep in descending
creation order visits each node after all of its consumers.

Higher-order derivatives work because every vjp closure is itself written in
terms of the differentiable ops in this module: calling ``grad`` with
``create_graph=True`` executes the sweep with recording enabled, so the
returned gradients carry their own graph and can be differentiated again.
This is what makes exact second-order meta-gradients possible.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's rules."""


class GraphError(RuntimeError):
    """Illegal use of the computation graph (non-scalar output, reuse of a
    consumed graph, ...)."""


_state = threading.local()
_seq = itertools.count()


def _tls():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
    return _state


def is_grad_enabled() -> bool:
    return _tls().grad_enabled


class _GradMode:
    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        tls = _tls()
        self._prev = tls.grad_enabled
        tls.grad_enabled = self._enabled
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def no_grad() -> _GradMode:
    """Context manager suppressing graph recording."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


class Node:
    """One tape record: the op kind, its inputs, and its vjp closure."""

    __slots__ = ("op", "parents", "vjp", "out", "seq", "freed")

    def __init__(self, op, parents, vjp, out):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.out = out
        self.seq = next(_seq)
        self.freed = False


class Tensor:
    """Dense n-dimensional float64 array, optionally attached to the tape.

    A tensor with ``node is None`` is a leaf (parameter, constant, or the
    result of ``detach``); leaves never receive upstream gradients other
    than the ones accumulated for them directly.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, node=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.node = node

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = "" if self.node is None else f", op={self.node.op}"
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar -----------------------------------------------------

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

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, op, parents, vjp) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled():
        out.node = Node(op, tuple(parents), vjp, out)
    return out


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# -- broadcasting adjoint ---------------------------------------------------


def sum_to(g: Tensor, shape) -> Tensor:
    """Reduce ``g`` back to ``shape`` by summing broadcast axes."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise ops --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        data, "add", (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        data, "sub", (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        data,
        "mul",
        (a, b),
        lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        data,
        "div",
        (a, b),
        lambda g: (
            sum_to(div(g, b), a.shape),
            sum_to(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = astensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (neg(g),))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a scalar exponent."""
    a = astensor(a)
    p = float(p)
    return _record(
        a.data**p, "power", (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),)
    )


def exp(a) -> Tensor:
    a = astensor(a)
    out = _record(np.exp(a.data), "exp", (a,), None)
    if out.node is not None:
        out.node.vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = astensor(a)
    return _record(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def relu(a) -> Tensor:
    a = astensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record(
        a.data * mask, "relu", (a,), lambda g: (mul(g, Tensor(mask)),)
    )


def greater(a, b) -> Tensor:
    """Comparison mask ``a > b``; result is a constant (zero gradient)."""
    a, b = astensor(a), astensor(b)
    return Tensor((a.data > b.data).astype(np.float64))


# -- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _record(data, "reshape", (a,), lambda g: (reshape(g, src),))


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    _check(len(axes) == a.ndim, "transpose", f"{len(axes)} axes for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(
        np.transpose(a.data, axes), "transpose", (a,), lambda g: (transpose(g, inv),)
    )


def swap_last(a) -> Tensor:
    """Transpose the trailing two axes (matrix transpose of stacked matrices)."""
    a = astensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    src = a.shape
    return _record(data, "broadcast", (a,), lambda g: (sum_to(g, src),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    _check(len(tensors) > 0, "concat", "empty input list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} on axis {axis}"
        )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i in range(len(sizes)):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(take(g, tuple(key)))
        return tuple(outs)

    return _record(data, "concat", tuple(tensors), vjp)


def take(a, key) -> Tensor:
    """Basic slicing / integer indexing; adjoint scatters into zeros."""
    a = astensor(a)
    data = a.data[key]
    src = a.shape
    return _record(
        np.array(data, dtype=np.float64), "take", (a,), lambda g: (put(g, key, src),)
    )


def put(g, key, shape) -> Tensor:
    """Embed ``g`` at ``key`` inside a zero tensor of ``shape`` (adjoint of take)."""
    g = astensor(g)
    data = np.zeros(shape, dtype=np.float64)
    data[key] = g.data
    return _record(data, "put", (g,), lambda u: (take(u, key),))


def pad2d(a, ph: int, pw: int) -> Tensor:
    """Zero-pad the trailing two (spatial) axes of an N×C×H×W tensor."""
    a = astensor(a)
    _check(a.ndim == 4, "pad2d", f"expected 4-d input, got {a.shape}")
    if ph == 0 and pw == 0:
        return a
    data = np.pad(a.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c, h, w = a.shape
    key = (slice(None), slice(None), slice(ph, ph + h), slice(pw, pw + w))
    return _record(data, "pad2d", (a,), lambda g: (take(g, key),))


# -- reductions -------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _record(data, "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for i in axes:
        count *= a.shape[i]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max-reduce; gradient splits evenly among tied maxima."""
    a = astensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = np.max(a.data, axis=axes, keepdims=True)
    mask = (a.data == data).astype(np.float64)
    mask /= np.sum(mask, axis=axes, keepdims=True)
    out = data if keepdims else np.squeeze(data, axis=axes)
    src = a.shape
    kept = data.shape

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (mul(broadcast_to(g, src), Tensor(mask)),)

    return _record(out, "max", (a,), vjp)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check(a.ndim >= 2 and b.ndim >= 2, "matmul", f"need 2-d operands, got {a.shape} @ {b.shape}")
    _check(
        a.shape[-1] == b.shape[-2],
        "matmul",
        f"inner dimensions differ: {a.shape} @ {b.shape}",
    )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} @ {b.shape} do not broadcast")

    def vjp(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape)
        gb = sum_to(matmul(swap_last(a), g), b.shape)
        return (ga, gb)

    return _record(data, "matmul", (a, b), vjp)


# -- image patch extraction (backs convolution and pooling) ------------------


def _conv_geometry(h, w, kh, kw, sh, sw):
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    return oh, ow


def im2col(x, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Extract sliding kh×kw patches of an N×C×H×W tensor.

    Returns (N*oh*ow, C*kh*kw) rows, one flattened patch per output pixel.
    The adjoint is ``col2im``; the pair is mutually adjoint and linear, so
    arbitrary-order derivatives reduce to bouncing between the two.
    """
    x = astensor(x)
    _check(x.ndim == 4, "im2col", f"expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    _check(h >= kh and w >= kw, "im2col", f"kernel {kh}x{kw} exceeds input {h}x{w}")
    oh, ow = _conv_geometry(h, w, kh, kw, sh, sw)
    s0, s1, s2, s3 = x.data.strides
    windows = as_strided(
        x.data,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    shape = x.shape
    return _record(
        np.ascontiguousarray(cols),
        "im2col",
        (x,),
        lambda g: (col2im(g, shape, kh, kw, sh, sw),),
    )


def col2im(cols, x_shape, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Scatter-add patch rows back onto an N×C×H×W canvas (adjoint of im2col)."""
    cols = astensor(cols)
    n, c, h, w = x_shape
    oh, ow = _conv_geometry(h, w, kh, kw, sh, sw)
    _check(
        cols.shape == (n * oh * ow, c * kh * kw),
        "col2im",
        f"expected {(n * oh * ow, c * kh * kw)}, got {cols.shape}",
    )
    patches = cols.data.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(x_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += patches[
                :, :, i, j, :, :
            ]
    return _record(
        out, "col2im", (cols,), lambda g: (im2col(g, kh, kw, sh, sw),)
    )


# -- the reverse sweep ------------------------------------------------------


@dataclass
class SweepStats:
    """Instrumentation for the most recent reverse sweep on this thread."""

    nodes: int = 0
    visits: int = 0


def last_sweep() -> SweepStats:
    if not hasattr(_state, "sweep"):
        _state.sweep = SweepStats()
    return _state.sweep


def _reachable(root: Node):
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        for p in node.parents:
            if p.node is not None:
                stack.append(p.node)
    order.sort(key=lambda n: n.seq, reverse=True)
    return order


def grad(output: Tensor, wrt, create_graph: bool = False, retain_graph=None):
    """Gradients of a scalar ``output`` w.r.t. a collection of tensors.

    ``wrt`` may be a ParameterSet or a sequence of tensors; the result has
    the same container type. Tensors unreachable from ``output`` get zero
    gradients. With ``create_graph`` the returned gradients are themselves
    differentiable (the sweep records its own ops); without it the sweep
    runs unrecorded and the inputs' tape records are marked consumed.
    """
    if output.size != 1:
        raise GraphError(f"grad requires a scalar output, got shape {output.shape}")
    retain = create_graph if retain_graph is None else retain_graph

    as_pset = isinstance(wrt, ParameterSet)
    targets = list(wrt.tensors()) if as_pset else list(wrt)

    stats = SweepStats()
    _state.sweep = stats
    pending: dict[int, Tensor] = {}
    results: dict[int, Tensor] = {}
    keep = {id(t) for t in targets}

    if output.node is not None:
        order = _reachable(output.node)
        stats.nodes = len(order)
        for node in order:
            if node.freed:
                raise GraphError(
                    f"graph consumed: node '{node.op}' was already swept without "
                    "retain_graph/create_graph"
                )
        pending[id(output)] = Tensor(np.ones_like(output.data))
        mode = enable_grad() if create_graph else no_grad()
        with mode:
            for node in order:
                g = pending.pop(id(node.out), None)
                if g is None:
                    continue
                if id(node.out) in keep:
                    results[id(node.out)] = g
                stats.visits += 1
                parent_grads = node.vjp(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None:
                        continue
                    cur = pending.get(id(p))
                    pending[id(p)] = pg if cur is None else add(cur, pg)
                if not retain:
                    node.freed = True
        for k in keep:
            if k in pending:
                results[k] = pending[k]
    elif id(output) in keep:
        results[id(output)] = Tensor(np.ones_like(output.data))

    grads = []
    for t in targets:
        g = results.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = g.detach()
        grads.append(g)

    if as_pset:
        return ParameterSet(zip(wrt.names(), grads))
    return grads


# -- named parameter collections ---------------------------------------------


class ParameterSet:
    """Ordered name → Tensor mapping for model parameters.

    Reads through ``__getitem__`` / ``items`` / ``tensors`` bump a counter,
    which lets tests assert that a code path never consulted a particular
    parameter set (e.g. the co-learner during evaluation).
    """

    def __init__(self, items=None):
        self._d: dict[str, Tensor] = {}
        self.read_count = 0
        if items is not None:
            pairs = items.items() if isinstance(items, dict) else items
            for k, v in pairs:
                self._d[str(k)] = astensor(v)

    def __setitem__(self, name: str, value):
        self._d[name] = astensor(value)

    def __getitem__(self, name: str) -> Tensor:
        self.read_count += 1
        return self._d[name]

    def __contains__(self, name: str) -> bool:
        return name in self._d

    def __len__(self) -> int:
        return len(self._d)

    def __iter__(self):
        return iter(self._d)

    def names(self):
        return list(self._d)

    def tensors(self):
        self.read_count += 1
        return list(self._d.values())

    def items(self):
        self.read_count += 1
        return list(self._d.items())

    def map(self, fn) -> "ParameterSet":
        return ParameterSet((k, fn(v)) for k, v in self.items())

    def detach(self) -> "ParameterSet":
        return self.map(lambda t: t.detach())

    def copy(self) -> "ParameterSet":
        return self.map(lambda t: t.copy())

    def num_elements(self) -> int:
        return sum(t.size for t in self._d.values())

    def with_prefix(self, prefix: str) -> "ParameterSet":
        return ParameterSet(
            (k, v) for k, v in self.items() if k.startswith(prefix)
        )

    def update(self, other: "ParameterSet") -> "ParameterSet":
        merged = ParameterSet(self.items())
        for k, v in other.items():
            merged[k] = v
        return merged

    def allclose(self, other: "ParameterSet", atol=0.0, rtol=0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(a.data, b.data, atol=atol, rtol=rtol)
            for (_, a), (_, b) in zip(self.items(), other.items())
        )


# -- numeric gradient oracle --------------------------------------------------


def finite_diff(f, at: ParameterSet, step: float = 1e-6) -> ParameterSet:
    """Central-difference gradient estimate of a scalar function.

    ``f`` receives a ParameterSet (same names as ``at``) and must return a
    float or 0-d tensor. Every coordinate is perturbed by ±step, so this is
    only meant for small parameter counts — it is the test oracle, not a
    training tool.
    """
    if step <= 0:
        raise ValueError("finite_diff: step must be positive")
    base = at.copy()
    grads = ParameterSet()
    for name in base.names():
        ref = base[name]
        g = np.zeros_like(ref.data)
        flat = ref.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _scalar(f(base))
            flat[i] = orig - step
            lo = _scalar(f(base))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = Tensor(g)
    return grads


def _scalar(x) -> float:
    if isinstance(x, Tensor):
        return x.item()
    return float(x)
