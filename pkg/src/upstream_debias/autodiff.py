"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

The tape is dynamic: every operation appends a node carrying a global sequence
number, and ``backward`` replays the reachable nodes in exact reverse insertion
order. Gradients are accumulated additively into ``Tensor.grad`` for every
tensor that requires a gradient.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

logger = logging.getLogger(__name__)

_SEQ = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A node of the differentiation graph.

    Attributes:
        data: float64 array holding the values.
        requires_grad: whether ``backward`` accumulates into ``grad``.
        grad: accumulated gradient of the same shape as ``data``, or None.
        op: name of the operation that produced this tensor ("leaf" for inputs).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], tuple]] = None,
        _op: str = "leaf",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = _op
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in output")


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, data)
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        _parents=parents if requires else (),
        _backward=backward_fn if requires else None,
        _op=op,
    )


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable ``t`` needing it."""
    if root.data.size != 1:
        raise UsageError(f"backward: root must be a single element, got shape {root.shape}")
    if not root.requires_grad:
        return

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in nodes:
        g = flow.pop(id(t), None)
        if g is None:
            continue
        _check_finite(f"backward[{t.op}]", g)
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            flow[key] = pg if key not in flow else flow[key] + pg


# --- operations -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _node("matmul", A @ B, (a, b), bw)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row"
    if b.data.ndim == 0:
        return "scalar"
    raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    """Element-wise sum; ``b`` may also be a row vector or a 0-d tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and (b.data.ndim == 2 and a.data.ndim == 1 or a.data.ndim == 0):
        a, b = b, a
    kind = _binary_shapes("add", a, b)

    def bw(g):
        if kind == "same":
            return g, g
        if kind == "row":
            return g, g.sum(axis=0)
        return g, np.asarray(g.sum())

    return _node("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _node("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node("relu", a.data * mask, (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    A = a.data
    return _node("log", np.log(A), (a,), lambda g: (g / A,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (row-wise for matrices)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node("softmax", out, (a,), bw)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape, (len(targets),))
    y = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if y.shape != (n,):
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    if n == 0:
        raise UsageError("cross_entropy: empty batch")
    if y.min() < 0 or y.max() >= c:
        raise UsageError(f"cross_entropy: target outside [0, {c})")
    Z = logits.data
    shifted = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _node("cross_entropy", np.asarray(loss), (logits,), bw)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node("sum", np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise UsageError("mean: empty axis")
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _node("mean", np.asarray(a.data.mean(axis=axis)), (a,), bw)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a matrix (embedding lookup)."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("take_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise UsageError(f"take_rows: index outside [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node("take_rows", table.data[idx], (table,), bw)


def sq_norm(a: Tensor) -> Tensor:
    """Squared L2 norm of all entries."""
    A = a.data
    return _node("sq_norm", np.asarray(np.dot(A.ravel(), A.ravel())), (a,), lambda g: (2.0 * g * A,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat: no inputs")
    ref = tensors[0]
    ax = axis % ref.data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.data.ndim) if d != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape, a.shape)
    return _node("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _node("reshape", out.copy(), (a,), lambda g: (g.reshape(old),))


def grad_reverse(a: Tensor, lam: float = 1.0) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ConfigError(f"grad_reverse: lambda must be non-negative, got {lam}")
    lam = float(lam)
    return _node("grad_reverse", a.data.copy(), (a,), lambda g: (-lam * g,))


# --- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update applied in place to ``params``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        _check_finite("adam_step", p.data)


class Adam:
    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.betas[0],
            self.betas[1],
            self.eps,
        )
