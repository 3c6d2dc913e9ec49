"""Reverse-mode automatic differentiation over numpy arrays.

Every vector-Jacobian product is written with the same differentiable
primitives, so gradients can themselves be differentiated
(``backward(..., create_graph=True)``). That is what the metagradient needs:
one differentiation through a gradient step.

The primitive set is closed on purpose: affine maps, elementwise
nonlinearities, reductions, indexing, concatenation, stop-gradient and a
linear recurrence along the leading axis.
"""

import threading
from contextlib import contextmanager

import numpy as np

from staclab import kernels


class NumericFailure(FloatingPointError):
    """A primitive produced a NaN or infinity."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value produced by '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag):
    prev = grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context in which new ops record no graph."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.vjp = None
        self.op = "leaf"

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _node(data, parents, vjp, op):
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericFailure(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    if axes:
        g = tsum(g, axes, False)
    return reshape(g, tuple(shape))


# -- binary arithmetic --------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(neg(g), b.shape) if needs[1] else None,
        )

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (
            _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
        )

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(div(g, b), a.shape)
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(data, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    c = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**c

    def vjp(g, needs):
        if c == 1.0:
            return (g,)
        return (mul(g, mul(c, power(a, c - 1.0))),)

    return _node(data, (a,), vjp, "power")


def matmul(a, b):
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


# -- shape ops ----------------------------------------------------------------


def transpose(a):
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g, needs: (transpose(g),), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, orig),), "reshape")


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    orig = a.shape
    data = np.broadcast_to(a.data, shape).copy()
    return _node(data, (a,), lambda g, needs: (_unbroadcast(g, orig),), "broadcast_to")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    orig = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in np.atleast_1d(axis))

    def vjp(g, needs):
        if not keepdims:
            kept = tuple(1 if i in axes else s for i, s in enumerate(orig))
            g = reshape(g, kept)
        return (broadcast_to(g, orig),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def getitem(a, idx):
    a = as_tensor(a)
    orig = a.shape

    def vjp(g, needs):
        return (_scatter(g, idx, orig),)

    return _node(a.data[idx], (a,), vjp, "getitem")


def _scatter(g, idx, shape):
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)

    def vjp(gg, needs):
        return (getitem(gg, idx),)

    return _node(out, (g,), vjp, "scatter")


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), vjp, "concatenate")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concatenate(expanded, axis=axis)


# -- elementwise nonlinearities -----------------------------------------------


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    holder = []

    def vjp(g, needs):
        return (mul(g, holder[0]),)

    out = _node(data, (a,), vjp, "exp")
    holder.append(out)
    return out


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _node(data, (a,), lambda g, needs: (div(g, a),), "log")


def tanh(a):
    a = as_tensor(a)
    holder = []

    def vjp(g, needs):
        t = holder[0]
        return (mul(g, sub(1.0, mul(t, t))),)

    out = _node(np.tanh(a.data), (a,), vjp, "tanh")
    holder.append(out)
    return out


def sigmoid(a):
    a = as_tensor(a)
    holder = []

    def vjp(g, needs):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _node(data, (a,), vjp, "sigmoid")
    holder.append(out)
    return out


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, (a,), lambda g, needs: (mul(g, mask),), "relu")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    holder = []

    def vjp(g, needs):
        return (div(mul(g, 0.5), holder[0]),)

    out = _node(data, (a,), vjp, "sqrt")
    holder.append(out)
    return out


class StopGradientTape:
    """Values seen by every stop-gradient, in call order.

    Recording at a reference point and replaying elsewhere evaluates a
    function whose stop-gradient inputs are frozen at the reference, which
    is the function its gradient is the derivative of. Finite-difference
    checks use this.
    """

    def __init__(self):
        self.values = []
        self.replaying = False
        self.position = 0

    def _visit(self, data):
        if not self.replaying:
            self.values.append(np.array(data))
            return data
        if self.position >= len(self.values):
            raise RuntimeError("replay visited more stop-gradients than were recorded")
        frozen = self.values[self.position]
        if frozen.shape != np.shape(data):
            raise RuntimeError(f"stop-gradient {self.position} changed shape: {frozen.shape} vs {np.shape(data)}")
        self.position += 1
        return frozen


@contextmanager
def _with_tape(tape):
    prev = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def record_stop_gradients():
    """Context yielding a fresh :class:`StopGradientTape` that records."""
    return _with_tape(StopGradientTape())


@contextmanager
def replay_stop_gradients(tape):
    """Context in which stop-gradients return the recorded values in order."""
    tape.replaying, tape.position = True, 0
    with _with_tape(tape):
        yield tape
    if tape.position != len(tape.values):
        raise RuntimeError(f"replay used {tape.position} of {len(tape.values)} recorded stop-gradients")


def stop_gradient(a):
    """Value-transparent barrier: no gradient flows to ``a``."""
    tape = getattr(_state, "tape", None)
    data = a.data if isinstance(a, Tensor) else a
    if tape is not None:
        data = tape._visit(data)
    return Tensor(data)


sg = stop_gradient


def where(cond, a, b):
    """Select elementwise with a constant boolean mask."""
    mask = np.asarray(cond, dtype=np.float64)
    return add(mul(a, mask), mul(b, 1.0 - mask))


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    out = add(log(tsum(exp(sub(a, shift)), axis, True)), shift)
    if not keepdims:
        out = reshape(out, tuple(np.delete(np.array(out.shape), axis % a.ndim)))
    return out


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    return sub(a, logsumexp(a, axis, keepdims=True))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis))


def gather_last(a, indices):
    """``a[..., indices[...]]``: pick one entry per row along the last axis."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    onehot = np.zeros(a.shape)
    np.put_along_axis(onehot, indices[..., None], 1.0, axis=-1)
    return tsum(mul(a, onehot), -1)


def linear_recurrence(x, k, reverse=True):
    """``y[t] = x[t] + k[t] * y[t+1]`` (``reverse``) or ``... * y[t-1]``.

    Runs along axis 0 with a zero boundary. The adjoint is the same
    recurrence in the opposite direction with shifted coefficients, so the
    op is differentiable to any order.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.shape != k.shape:
        raise ValueError(f"recurrence shape mismatch {x.shape} vs {k.shape}")
    data = kernels.linear_recurrence(x.data, k.data, reverse)
    holder = []

    def vjp(g, needs):
        y = holder[0]
        zero = Tensor(np.zeros((1,) + x.shape[1:]))
        if reverse:
            k_adj = concatenate([zero, getitem(k, slice(None, -1))], 0)
            y_next = concatenate([getitem(y, slice(1, None)), zero], 0)
            adj = linear_recurrence(g, k_adj, reverse=False)
            return adj, (mul(adj, y_next) if needs[1] else None)
        k_adj = concatenate([getitem(k, slice(1, None)), zero], 0)
        y_prev = concatenate([zero, getitem(y, slice(None, -1))], 0)
        adj = linear_recurrence(g, k_adj, reverse=True)
        return adj, (mul(adj, y_prev) if needs[1] else None)

    out = _node(data, (x, k), vjp, "linear_recurrence")
    holder.append(out)
    return out


# -- reverse pass --------------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output, inputs, create_graph=False, grad_output=None):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    Args:
        output: tensor to differentiate; scalar unless ``grad_output`` given.
        inputs: sequence of tensors.
        create_graph: record the reverse pass so the returned gradients can
            be differentiated again.
        grad_output: cotangent for a non-scalar ``output``.

    Returns:
        List of tensors shaped like ``inputs``; zeros where unused.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ValueError("backward on a non-scalar output needs grad_output")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output)
    results = [None] * len(inputs)
    if output.requires_grad:
        order = _toposort(output)
        wanted = {id(t) for t in inputs}
        # keep only nodes with a path to some input
        live = set()
        for node in order:
            if id(node) in wanted or any(id(p) in live for p in node.parents):
                live.add(id(node))
        grads = {id(output): seed}
        with _grad_mode(bool(create_graph)):
            for node in reversed(order):
                if id(node) not in live or not node.parents:
                    continue
                g = grads.get(id(node))
                if g is None:
                    continue
                if id(node) not in wanted:
                    del grads[id(node)]
                needs = tuple(id(p) in live for p in node.parents)
                for p, pg in zip(node.parents, node.vjp(g, needs)):
                    if pg is None or id(p) not in live:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
        for i, t in enumerate(inputs):
            results[i] = grads.get(id(t))
    for i, t in enumerate(inputs):
        if results[i] is None:
            results[i] = Tensor(np.zeros(t.shape))
        elif not create_graph:
            results[i] = constant(results[i])
    return results
