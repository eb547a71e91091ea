"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive computes its forward value with numpy and, when
any operand requires gradients, records a node holding references to its
operands plus a closure that maps the output gradient onto operand gradients.
:func:`backward` orders the recorded nodes topologically (this ordering is the
tape), replays it once in reverse and then drops the recorded links.

Broadcasting is deliberately narrow: the second operand of a binary op may
have a shape equal to a suffix of the first operand's shape (row-vector bias,
positional tables added to a batch) or be a scalar.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "wellcast_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A float64 array with an optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes that broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or len(sb) == 0:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# binary primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_suffix(a, b, "add")
    sb = b.shape

    def bw(g):
        return g, _reduce_to(g, sb)

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < b.ndim:
        # scalar - tensor
        if a.ndim != 0:
            raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
        def bw_r(g):
            return np.sum(g), -g
        return Tensor._result(a.data - b.data, (a, b), bw_r)
    _check_suffix(a, b, "sub")
    sb = b.shape

    def bw(g):
        return g, -_reduce_to(g, sb)

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_suffix(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape

    def bw(g):
        return g * bd, _reduce_to(g * ad, sb)

    return Tensor._result(ad * bd, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes act as a batch.

    ``b`` may be 2-D while ``a`` carries batch axes (shared weight matrix).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), bw)


_UNARY = ("sigmoid", "tanh", "relu")
_BINARY = ("add", "mul", "sub")


def elementwise(kind: str, x: Tensor, y: Optional[Tensor] = None) -> Tensor:
    """Apply a named element-wise function; binary kinds need equal shapes."""
    if kind in _UNARY:
        if y is not None:
            raise ContractError(f"{kind} takes a single operand")
        return {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}[kind](x)
    if kind in _BINARY:
        if y is None:
            raise ContractError(f"{kind} needs two operands")
        x, y = _lift(x), _lift(y)
        if x.shape != y.shape:
            raise ShapeError(f"{kind}: shapes {x.shape} and {y.shape} differ")
        return {"add": add, "mul": mul, "sub": sub}[kind](x, y)
    raise ContractError(f"unknown element-wise kind {kind!r}")


# ---------------------------------------------------------------------------
# unary primitives
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * s * (1.0 - s),)

    return Tensor._result(s, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return Tensor._result(t, (x,), bw)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0

    def bw(g):
        return (g * on,)

    return Tensor._result(np.where(on, x.data, 0.0), (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each row over the last axis, then scale by gamma and shift by beta.

    Uses the population variance with ``eps`` added under the square root.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor._result(xhat * gd + beta.data, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the caller decides when it is active."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2-D, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return Tensor._result(np.transpose(x.data, axes), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._result(x.data.reshape(shape), (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return Tensor._result(x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(data, tuple(tensors), bw)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum()), (x,), bw)


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def bw(g):
        return (np.full(shape, float(g) / n),)

    return Tensor._result(np.asarray(x.data.mean()), (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Tensors listed in ``params`` that the loss does not depend on receive a
    zero gradient. Recorded links are released afterwards, so the same graph
    cannot be replayed twice.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5
) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` is re-evaluated with each parameter component nudged by ``±eps`` in
    place. Returns the maximum of ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"non-finite loss while perturbing {p.name or 'parameter'}[{i}]")
                num = (up - down) / (2.0 * eps)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
