"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a node to a :class:`Tape`.  A tape is created
lazily by the first recorded op of a forward pass (or explicitly with
``with Tape():``) and is consumed by a single call to :func:`backward`.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


@dataclass
class Tape:
    """Append-only record of the ops of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: Node) -> int:
        if self.consumed:
            raise ContractError("cannot record onto a tape that has already been backpropagated")
        self.nodes.append(node)
        return len(self.nodes) - 1


_IMPLICIT: list[Tape] = [Tape()]


def _implicit_tape() -> Tape:
    # Shared tape for ops recorded outside any ``with Tape()`` block;
    # replaced once consumed.
    if _IMPLICIT[0].consumed:
        _IMPLICIT[0] = Tape()
    return _IMPLICIT[0]


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return constant tensors."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    result = Tensor(out)
    if not _GRAD_ENABLED.get() or not any(t.requires_grad for t in inputs):
        return result
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError(f"op {op!r} mixes tensors from different tapes")
    if tapes:
        tape = next(iter(tapes.values()))
    else:
        tape = _ACTIVE_TAPE.get()
        if tape is None:
            tape = _implicit_tape()
    result.requires_grad = True
    result.tape = tape
    result.node_id = tape.append(Node(op, tuple(inputs), backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    A tape can be consumed once; a second call raises :class:`ContractError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("loss is not on a tape (no input requires grad)")
    tape = loss.tape
    if tape.consumed:
        raise ContractError("tape already consumed by an earlier backward call; re-run the forward pass")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node_id is not None and inp.tape is tape:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
            elif inp.node_id is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
    tape.consumed = True
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("div", ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (x,), bw)


# linear algebra / shape ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record("swapaxes", np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", x.data[index], (x,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup); output shape ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    src = table.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[-1]))
        return (full,)

    return _record("take_rows", table.data[ids], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _record("stack", np.stack([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# normalizers -------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _record("log_softmax", out, (x,),
                   lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * x_hat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record("layer_norm", out, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout.  ``rate == 0`` is the identity; otherwise ``rng`` is mandatory."""
    if rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout with rate > 0 needs an explicit seeded Generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [batch, classes] logits and [batch] labels, got "
                         f"{logits.shape} and {labels.shape}")
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise IndexError(f"label out of range [0, {n_cls}): {labels.tolist()}")
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(labels.size), labels))
    return mul(tsum(picked), -1.0 / labels.size)


# verification ------------------------------------------------------------------

ROUNDOFF_FACTOR = 100.0


def roundoff_bound(f0: float, h: float) -> float:
    """Absolute error a central difference can show from f64 round-off alone."""
    return ROUNDOFF_FACTOR * np.finfo(np.float64).eps * max(1.0, abs(f0)) / h


def _fd_error(analytic: float, numeric: float, atol: float, floor: float) -> float:
    diff = abs(numeric - analytic)
    if diff <= atol:
        return 0.0
    return diff / max(abs(numeric), abs(analytic), floor)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``coords`` restricts the check to a subset of flat indices.  Gradients
    smaller than ``floor`` are compared on an absolute scale, and differences
    within the round-off bound of the difference quotient count as agreement.
    """
    first = f(x)
    again = f(x)
    if first.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {first.shape}")
    if not np.array_equal(first.data, again.data):
        raise ContractError("function under check is not deterministic (is dropout enabled?)")

    was_required = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = was_required

    atol = roundoff_bound(first.item(), h)
    flat = x.data.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, _fd_error(analytic[i], numeric, atol, floor))
    return worst


def check_parameters(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Finite-difference check of a closure against every named parameter.

    One backward pass supplies all analytic gradients; ``per_tensor`` samples
    that many coordinates per tensor (all coordinates when ``None``).
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = f()
    atol = roundoff_bound(loss.item(), h)
    backward(loss)
    analytic = {k: (np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy())
                for k, p in params.items()}
    for p in params.values():
        p.grad = None
    report = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if per_tensor is None or per_tensor >= p.size:
                idx = range(p.size)
            else:
                idx = rng.choice(p.size, size=per_tensor, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                worst = max(worst, _fd_error(analytic[name][i], numeric, atol, floor))
            report[name] = worst
    return report
