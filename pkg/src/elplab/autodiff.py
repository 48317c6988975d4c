"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps an immutable numpy array. While a :class:`Tape` is
active (``with Tape() as tape:``), every operation whose inputs require a
gradient is recorded as a :class:`Node`; :func:`backward` replays the tape
in reverse and accumulates gradients on the leaves.

Broadcasting is deliberately narrow: operands of elementwise operations must
have equal shapes, or one must be a scalar, or one shape must equal the
trailing dimensions of the other (leading-axis broadcasting, e.g. a bias
vector added to a batch of rows).
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from elplab.errors import DomainError, ElpError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

OP_KINDS = (
    "add",
    "sub",
    "mul",
    "matmul",
    "concat",
    "slice",
    "reshape",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "mean",
    "sum",
    "variance",
    "sqrt",
    "abs",
    "clip",
    "straight_through",
)

_active = threading.local()


class Tensor:
    """Immutable float64 array with an optional gradient slot."""

    __slots__ = ("_values", "requires_grad", "grad", "_producer")

    def __init__(self, values, requires_grad=False):
        arr = np.array(values, dtype=np.float64)
        _check_finite(arr, "Tensor")
        arr.setflags(write=False)
        self._values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._producer = None

    @classmethod
    def _wrap(cls, arr, op_kind):
        """Adopt ``arr`` without copying it."""
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr, op_kind)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out = cls.__new__(cls)
        out._values = arr
        out.requires_grad = False
        out.grad = None
        out._producer = None
        return out

    @property
    def values(self):
        return self._values

    @property
    def shape(self):
        return self._values.shape

    @property
    def ndim(self):
        return self._values.ndim

    @property
    def size(self):
        return self._values.size

    def item(self):
        """The value of a single-element tensor as a Python float."""
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._values.reshape(()))

    def numpy(self):
        """A writable copy of the values."""
        return np.array(self._values)

    def detach(self):
        """The same values, cut off from any tape."""
        return Tensor._wrap(self._values, "detach")

    def zero_grad(self):
        self.grad = None

    def assign_(self, values):
        """Replace the values of a parameter leaf (optimizer updates only)."""
        if self._producer is not None:
            raise ElpError("assign_ is only valid on leaf tensors")
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"assign_: shape {arr.shape} does not match {self.shape}")
        _check_finite(arr, "assign_")
        arr.setflags(write=False)
        self._values = arr

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return forward_op("add", self, other)

    def __radd__(self, other):
        return forward_op("add", other, self)

    def __sub__(self, other):
        return forward_op("sub", self, other)

    def __rsub__(self, other):
        return forward_op("sub", other, self)

    def __mul__(self, other):
        return forward_op("mul", self, other)

    def __rmul__(self, other):
        return forward_op("mul", other, self)

    def __neg__(self):
        return forward_op("mul", self, -1.0)

    def __matmul__(self, other):
        return forward_op("matmul", self, other)

    def __getitem__(self, index):
        return forward_op("slice", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", self, shape=shape)


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, output and the local backward rule."""

    op_kind: str
    inputs: tuple
    output: Tensor
    rule: Callable
    tape: "Tape"


class Tape:
    """Ordered record of operations, owned by the thread that activated it."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)
        node.output._producer = node


def _stack():
    if not hasattr(_active, "tapes"):
        _active.tapes = []
    return _active.tapes


def active_tape():
    """The innermost active tape of this thread, or None."""
    tapes = _stack()
    return tapes[-1] if tapes else None


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values (NaN or Inf)")


def as_tensor(value):
    """``value`` itself when it is a Tensor, else a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _is_scalar(shape):
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def _broadcast_shape(op_kind, ashape, bshape):
    if ashape == bshape:
        return ashape
    if _is_scalar(bshape):
        return ashape
    if _is_scalar(ashape):
        return bshape
    if len(bshape) < len(ashape) and ashape[len(ashape) - len(bshape) :] == bshape:
        return ashape
    if len(ashape) < len(bshape) and bshape[len(bshape) - len(ashape) :] == ashape:
        return bshape
    raise ShapeError(f"{op_kind}: shapes {ashape} and {bshape} do not conform")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if _is_scalar(shape):
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _expand(grad, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(np.asarray(grad).reshape(()), shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _axis_size(shape, axis):
    if axis is None:
        return int(np.prod(shape, dtype=np.int64))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes], dtype=np.int64))


_RULES = {}


def _register(op_kind):
    def deco(func):
        _RULES[op_kind] = func
        return func

    return deco


@_register("add")
def _add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a.values + b.values, lambda g: (
        _unbroadcast(g, a.shape),
        _unbroadcast(g, b.shape),
    )


@_register("sub")
def _sub(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    return a.values - b.values, lambda g: (
        _unbroadcast(g, a.shape),
        _unbroadcast(-g, b.shape),
    )


@_register("mul")
def _mul(a, b):
    _broadcast_shape("mul", a.shape, b.shape)
    return a.values * b.values, lambda g: (
        _unbroadcast(g * b.values, a.shape),
        _unbroadcast(g * a.values, b.shape),
    )


@_register("matmul")
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    return a.values @ b.values, lambda g: (g @ b.values.T, a.values.T @ g)


@_register("concat")
def _concat(*inputs, axis=-1):
    if not inputs:
        raise ShapeError("concat: no inputs")
    ndim = inputs[0].ndim
    ax = axis % ndim
    for t in inputs:
        if t.ndim != ndim or any(
            t.shape[i] != inputs[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in inputs]} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in inputs])[:-1]
    return np.concatenate([t.values for t in inputs], axis=ax), lambda g: tuple(
        np.split(g, bounds, axis=ax)
    )


@_register("slice")
def _slice(a, index=()):
    if not isinstance(index, tuple):
        index = (index,)
    try:
        out = a.values[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {index} invalid for shape {a.shape}") from exc

    def rule(g):
        full = np.zeros(a.shape)
        # repeated fancy indices accumulate
        np.add.at(full, index, g)
        return (full,)

    return out, rule


@_register("reshape")
def _reshape(a, shape=()):
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return out, lambda g: (g.reshape(a.shape),)


@_register("relu")
def _relu(a):
    mask = a.values > 0
    return np.where(mask, a.values, 0.0), lambda g: (g * mask,)


@_register("tanh")
def _tanh(a):
    out = np.tanh(a.values)
    return out, lambda g: (g * (1.0 - out * out),)


@_register("sigmoid")
def _sigmoid(a):
    x = a.values
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out, lambda g: (g * out * (1.0 - out),)


@_register("softmax")
def _softmax(a, axis=-1):
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@_register("log")
def _log(a):
    if np.any(a.values <= 0):
        raise DomainError(
            f"log: input must be positive, minimum is {a.values.min()!r}"
        )
    return np.log(a.values), lambda g: (g / a.values,)


@_register("exp")
def _exp(a):
    out = np.exp(a.values)
    return out, lambda g: (g * out,)


@_register("mean")
def _mean(a, axis=None, keepdims=False):
    n = _axis_size(a.shape, axis)
    return a.values.mean(axis=axis, keepdims=keepdims), lambda g: (
        _expand(g, a.shape, axis, keepdims) / n,
    )


@_register("sum")
def _sum(a, axis=None, keepdims=False):
    return a.values.sum(axis=axis, keepdims=keepdims), lambda g: (
        np.array(_expand(g, a.shape, axis, keepdims)),
    )


@_register("variance")
def _variance(a, axis=None, keepdims=False):
    n = _axis_size(a.shape, axis)
    centered = a.values - a.values.mean(axis=axis, keepdims=True)
    out = (centered * centered).mean(axis=axis, keepdims=keepdims)
    return out, lambda g: (_expand(g, a.shape, axis, keepdims) * 2.0 * centered / n,)


@_register("sqrt")
def _sqrt(a):
    if np.any(a.values < 0):
        raise DomainError(
            f"sqrt: input must be non-negative, minimum is {a.values.min()!r}"
        )
    out = np.sqrt(a.values)
    # subgradient 0 at the kink keeps norms of zero residuals differentiable
    safe = np.where(out > 0, out, 1.0)
    return out, lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),)


@_register("abs")
def _abs(a):
    return np.abs(a.values), lambda g: (g * np.sign(a.values),)


@_register("clip")
def _clip(a, low=-np.inf, high=np.inf):
    inside = (a.values >= low) & (a.values <= high)
    return np.clip(a.values, low, high), lambda g: (g * inside,)


@_register("straight_through")
def _straight_through(a, values=None):
    values = np.asarray(values, dtype=np.float64)
    if values.shape != a.shape:
        raise ShapeError(
            f"straight_through: values {values.shape} do not match {a.shape}"
        )
    return values, lambda g: (g,)


def forward_op(op_kind, *inputs, **attrs):
    """Evaluate ``op_kind`` on ``inputs`` and record it on the active tape.

    Parameters
    ----------
    op_kind : str
        One of :data:`OP_KINDS`.
    *inputs
        Tensors, or plain numbers/arrays which become constants.
    **attrs
        Operation attributes: ``axis``/``keepdims`` for reductions, softmax
        and concat, ``index`` for slice, ``shape`` for reshape, ``low``/``high``
        for clip, ``values`` for straight_through.

    Returns
    -------
    Tensor
        The result. It requires a gradient, and a node is recorded, when any
        input requires a gradient and a tape is active.
    """
    try:
        rule_factory = _RULES[op_kind]
    except KeyError as exc:
        raise DomainError(f"unknown op_kind {op_kind!r}") from exc
    tensors = tuple(as_tensor(t) for t in inputs)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        values, rule = rule_factory(*tensors, **attrs)
    try:
        out = Tensor._wrap(values, op_kind)
    except NonFiniteError as exc:
        shapes = [t.shape for t in tensors]
        raise NonFiniteError(f"{op_kind} on shapes {shapes}: {exc}") from exc
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape.record(Node(op_kind, tensors, out, rule, tape))
    return out


def backward(tape, root):
    """Accumulate d(root)/d(leaf) into the ``grad`` slot of every leaf.

    Leaves are tensors that require a gradient and were not produced by a
    node. Gradients accumulate across calls until cleared with
    :meth:`Tensor.zero_grad`.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    node = root._producer
    if node is None or node.tape is not tape:
        raise ElpError("backward: root was not produced by this tape")
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        for tensor, gin in zip(node.inputs, node.rule(gout)):
            if gin is None or not tensor.requires_grad:
                continue
            if tensor._producer is None:
                gin = np.array(gin, dtype=np.float64).reshape(tensor.shape)
                tensor.grad = gin if tensor.grad is None else tensor.grad + gin
            else:
                key = id(tensor)
                grads[key] = grads[key] + gin if key in grads else gin
    return root


def concat(tensors, axis=-1):
    return forward_op("concat", *tensors, axis=axis)


def relu(x):
    return forward_op("relu", x)


def tanh(x):
    return forward_op("tanh", x)


def sigmoid(x):
    return forward_op("sigmoid", x)


def softmax(x, axis=-1):
    return forward_op("softmax", x, axis=axis)


def log(x):
    return forward_op("log", x)


def exp(x):
    return forward_op("exp", x)


def mean(x, axis=None, keepdims=False):
    return forward_op("mean", x, axis=axis, keepdims=keepdims)


def tsum(x, axis=None, keepdims=False):
    return forward_op("sum", x, axis=axis, keepdims=keepdims)


def variance(x, axis=None, keepdims=False):
    return forward_op("variance", x, axis=axis, keepdims=keepdims)


def sqrt(x):
    return forward_op("sqrt", x)


def tabs(x):
    return forward_op("abs", x)


def clip(x, low, high):
    return forward_op("clip", x, low=low, high=high)


def straight_through(soft, values):
    """Forward ``values``, backward through ``soft`` unchanged."""
    return forward_op("straight_through", soft, values=values)


def gradient_errors(func, point, h=1e-5, max_coords=None, rng=None):
    """Per-input max relative error of analytic vs central-difference gradients.

    Parameters
    ----------
    func : callable
        Maps Tensors (one per entry of ``point``) to a scalar Tensor.
    point : sequence
        Arrays or Tensors at which to differentiate.
    h : float
        Central-difference step.
    max_coords : int, optional
        Check at most this many randomly chosen coordinates per input.
    rng : numpy.random.Generator, optional
        Chooses the coordinates when ``max_coords`` is given.

    Returns
    -------
    list of float
        One max relative error per input.
    """
    base = [np.array(as_tensor(p).values) for p in point]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    with Tape() as tape:
        out = func(*leaves)
    backward(tape, out)
    analytic = [l.grad if l.grad is not None else np.zeros(l.shape) for l in leaves]

    def evaluate(args):
        try:
            value = func(*[Tensor._wrap(a, "perturb") for a in args])
        except NonFiniteError as exc:
            raise NonFiniteError(f"finite_difference_check: {exc}") from exc
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise NonFiniteError("finite_difference_check: f is not finite")
        return value

    errors = []
    for i, arr in enumerate(base):
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            chooser = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(chooser.choice(arr.size, size=max_coords, replace=False))
        worst = 0.0
        for flat in coords:
            idx = np.unravel_index(flat, arr.shape)
            args = list(base)
            plus = arr.copy()
            plus[idx] += h
            minus = arr.copy()
            minus[idx] -= h
            args[i] = plus
            fplus = evaluate(args)
            args[i] = minus
            fminus = evaluate(args)
            central = (fplus - fminus) / (2.0 * h)
            grad = float(analytic[i][idx])
            err = abs(grad - central) / (abs(grad) + abs(central) + 1e-8)
            worst = max(worst, err)
        errors.append(worst)
    return errors


def finite_difference_check(func, point, h=1e-5, max_coords=None, rng=None):
    """Max over all coordinates of the relative gradient error.

    The error of one coordinate is
    ``|analytic - central| / (|analytic| + |central| + 1e-8)``.
    """
    errors = gradient_errors(func, point, h=h, max_coords=max_coords, rng=rng)
    return max(errors) if errors else 0.0
