"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

A :py:class:`Tensor` is a read-only ``numpy.ndarray`` of dtype float64. A :py:class:`Node`
wraps a tensor together with the operation that produced it, so that
:py:func:`backward` can push gradients from a scalar root to every :py:class:`Parameter`
it depends on. Nodes are stamped in creation order; that order is the tape, and it is
replayed in reverse during the backward pass.

Graphs are confined to the thread that built them. Tensors may be shared freely."""

from __future__ import annotations

import itertools, math, threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import special
from .util import ContractError, DimensionError, DomainError


Tensor = np.ndarray

LEAKY_SLOPE = 0.01

#: Lower bound on the argument seen by the square-root gradient
SQRT_EPS = 1e-24

_sequence = itertools.count()
_generations = itertools.count(1)
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


def _tapes() -> List[Tape]:
    try:
        return _state.tapes
    except AttributeError:
        _state.tapes = []
        return _state.tapes


def _last_generation() -> int:
    return getattr(_state, 'generation', 0)


def tensor(data) -> Tensor:
    """Copy ``data`` into a fresh read-only float64 array."""
    arr = np.array(data, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _frozen(arr) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable and arr.base is None:
        arr.setflags(write=False)
    elif arr.flags.writeable:
        arr = tensor(arr)
    return arr


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *args):
        _state.grad_enabled = self._prev


class Tape:
    """Append-only record of the nodes created by one forward pass.

    Entering a tape makes it the recording target for this thread; leaving it clears the
    record, which drops the backward closures (and the intermediate arrays they hold)."""

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._backward = None
            node.parents = ()
        self.nodes = []

    def backward(self, root: Node) -> Dict[Node, Tensor]:
        return backward(root)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *args):
        _tapes().remove(self)
        self.clear()


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A tensor value plus the record needed to differentiate through it."""

    __slots__ = 'value', 'parents', 'name', 'requires_grad', '_backward', '_seq', '_grad', '_grad_gen', '__weakref__'

    # numpy defers to the reflected operators below instead of broadcasting over a Node
    __array_ufunc__ = None
    __array_priority__ = 1000

    value: Tensor #: Forward value (read-only)
    parents: Tuple[Node, ...] #: Inputs of the producing operation
    name: str #: Operation or parameter name

    def __init__(self, value, parents: Tuple[Node, ...] = (), backward_fn: Optional[BackwardFn] = None, name: str = '', requires_grad: bool = False):
        self.value = _frozen(value)
        self.parents = parents
        self.name = name
        self.requires_grad = requires_grad
        self._backward = backward_fn
        self._seq = next(_sequence)
        self._grad: Optional[np.ndarray] = None
        self._grad_gen = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> Tensor:
        """Gradient from the most recent backward pass on this thread; zero if this node was not reached."""
        if self._grad is None or self._grad_gen != _last_generation():
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f'item() needs a single element, got shape {self.shape}')
        return float(self.value.reshape(()))

    def numpy(self) -> Tensor:
        return self.value

    def __repr__(self):
        return 'Node(%s%s, shape=%s)' % (self.name or 'const', '*' if self.requires_grad else '', self.shape)

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __getitem__(self, index): return getitem(self, index)


class Parameter(Node):
    """A trainable leaf. Its value is replaced, never mutated, by :py:meth:`assign`."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(tensor(value), name=name, requires_grad=True)

    def assign(self, value) -> None:
        value = tensor(value)
        if value.shape != self.value.shape:
            raise DimensionError(f'cannot assign to parameter {self.name}', self.value.shape, value.shape)
        self.value = value

    def __repr__(self):
        return 'Parameter(%s, shape=%s)' % (self.name, self.shape)


NodeLike = Union[Node, np.ndarray, float, int]


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(tensor(value))


def _make(value, parents: Tuple[Node, ...], backward_fn: BackwardFn, name: str) -> Node:
    if not (_grad_enabled() and any(p.requires_grad for p in parents)):
        return Node(value, name=name)
    node = Node(value, parents, backward_fn, name, requires_grad=True)
    tapes = _tapes()
    if tapes:
        tapes[-1].record(node)
    return node


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'{op}: incompatible shapes', a.shape, b.shape) from None


def backward(root: Node) -> Dict[Node, Tensor]:
    """Propagate d(root)/d(node) to every node reachable from the scalar ``root``.

    Returns the gradients of the reached :py:class:`Parameter` leaves. Afterwards
    ``node.grad`` holds the gradient of every reached node and reads as zero for
    every other node, including parameters from earlier passes."""
    if root.value.size != 1:
        raise ContractError(f'backward needs a scalar root, got shape {root.shape}')
    generation = next(_generations)
    _state.generation = generation

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    if not root.requires_grad:
        return {}

    # collect the reachable sub-tape, then replay it newest-first
    reached: Dict[int, Node] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in reached:
            continue
        reached[id(node)] = node
        stack.extend(p for p in node.parents if p.requires_grad)
    order = sorted(reached.values(), key=lambda n: n._seq, reverse=True)

    leaves: Dict[Node, Tensor] = {}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._grad = g
        node._grad_gen = generation
        if node._backward is None:
            if isinstance(node, Parameter):
                leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


# -- element-wise arithmetic -------------------------------------------------

def add(a: NodeLike, b: NodeLike) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, 'add')
    return _make(a.value + b.value, (a, b), lambda g: (g, g), 'add')


def sub(a: NodeLike, b: NodeLike) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, 'sub')
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), 'sub')


def mul(a: NodeLike, b: NodeLike) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, 'mul')
    return _make(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value), 'mul')


def div(a: NodeLike, b: NodeLike) -> Node:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b, 'div')
    if np.any(b.value == 0):
        raise DomainError('div: division by zero')
    out = a.value / b.value
    return _make(out, (a, b), lambda g: (g / b.value, -g * out / b.value), 'div')


def neg(a: NodeLike) -> Node:
    a = constant(a)
    return _make(-a.value, (a,), lambda g: (-g,), 'neg')


def square(a: NodeLike) -> Node:
    a = constant(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), 'square')


def sqrt(a: NodeLike) -> Node:
    a = constant(a)
    if np.any(a.value < 0):
        raise DomainError('sqrt: negative argument')
    out = np.sqrt(a.value)
    # finite at 0: the gradient saturates at 0.5 / sqrt(SQRT_EPS)
    return _make(out, (a,), lambda g: (0.5 * g / np.maximum(out, math.sqrt(SQRT_EPS)),), 'sqrt')


def exp(a: NodeLike) -> Node:
    a = constant(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), 'exp')


def log(a: NodeLike) -> Node:
    a = constant(a)
    if np.any(~(a.value > 0)):
        raise DomainError('log: argument must be positive')
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), 'log')


def tanh(a: NodeLike) -> Node:
    a = constant(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a: NodeLike) -> Node:
    a = constant(a)
    return _make(np.logaddexp(0.0, a.value), (a,), lambda g: (g * sigmoid_values(a.value),), 'softplus')


def leaky_relu(a: NodeLike) -> Node:
    a = constant(a)
    slope = np.where(a.value > 0, 1.0, LEAKY_SLOPE)
    return _make(a.value * slope, (a,), lambda g: (g * slope,), 'leaky_relu')


def clip(a: NodeLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Node:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = constant(a)
    out = np.clip(a.value, lo, hi)
    inside = out == a.value
    return _make(out, (a,), lambda g: (g * inside,), 'clip')


def where(cond, a: NodeLike, b: NodeLike) -> Node:
    """Element-wise select; only the chosen branch receives gradient."""
    cond = np.asarray(cond, dtype=bool)
    a, b = constant(a), constant(b)
    out = np.where(cond, a.value, b.value)
    return _make(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)), 'where')


def lgamma(a: NodeLike) -> Node:
    a = constant(a)
    return _make(special.lgamma(a.value), (a,), lambda g: (g * special.digamma(a.value),), 'lgamma')


def digamma(a: NodeLike) -> Node:
    a = constant(a)
    return _make(special.digamma(a.value), (a,), lambda g: (g * special.trigamma(a.value),), 'digamma')


# -- linear algebra ----------------------------------------------------------

def matmul(a: NodeLike, b: NodeLike) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError('matmul: incompatible shapes', a.shape, b.shape)

    def _backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.value.T, a.value.T @ g
        if b.ndim == 1 and a.ndim == 2:
            return np.outer(g, b.value), a.value.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.value @ g, np.outer(a.value, g)
        return g * b.value, g * a.value

    return _make(np.matmul(a.value, b.value), (a, b), _backward, 'matmul')


def affine(x: NodeLike, weight: NodeLike, bias: NodeLike) -> Node:
    """``x @ weight + bias`` for a batch ``x`` of shape (N, K)."""
    x, weight, bias = constant(x), constant(weight), constant(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError('affine: input does not match weight', x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise DimensionError('affine: bias does not match weight', weight.shape, bias.shape)
    out = x.value @ weight.value + bias.value
    return _make(out, (x, weight, bias), lambda g: (g @ weight.value.T, x.value.T @ g, g.sum(axis=0)), 'affine')


# -- reductions and shape ----------------------------------------------------

def sum(a: NodeLike, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    a = constant(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), _backward, 'sum')


def mean(a: NodeLike, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    a = constant(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) / float(count)


def softmax(a: NodeLike, axis: int = -1) -> Node:
    a = constant(a)
    e = np.exp(a.value - np.max(a.value, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),), 'softmax')


def concat(nodes: Iterable[NodeLike], axis: int = 0) -> Node:
    parts = tuple(constant(n) for n in nodes)
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise DimensionError('concat: incompatible shapes', *[p.shape for p in parts]) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), 'concat')


def getitem(a: NodeLike, index) -> Node:
    a = constant(a)
    out = a.value[index]

    def _backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), _backward, 'getitem')


def reshape(a: NodeLike, shape: Tuple[int, ...]) -> Node:
    a = constant(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise DimensionError('reshape: size mismatch', a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def column(a: NodeLike) -> Node:
    """View a length-N vector as an (N, 1) column."""
    a = constant(a)
    return reshape(a, a.shape + (1,))
