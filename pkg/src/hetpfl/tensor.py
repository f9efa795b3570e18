"""Dense float64 tensors with a reverse-mode gradient tape and Adam.

Tensors wrap immutable numpy arrays. Operations executed inside an active
:class:`GradientTape` are recorded in execution order; :func:`backward`
replays them in reverse to accumulate gradients for leaf tensors created
with ``requires_grad=True``.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)[w].data
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

# Logits are saturated beyond this magnitude so sigmoid stays strictly in (0, 1).
SIGMOID_CLAMP = 30.0

_local = threading.local()


def _active_tape() -> "GradientTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of float64 values."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    # make numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable and arr.base is None:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), False)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradientTape:
    """Records differentiable operations executed while it is active.

    A tape belongs to one thread and one training step. Entering it as a
    context manager makes it the recording target for that thread.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradientTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _make(out: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    t = Tensor._wrap(out, needs)
    if needs:
        tape.records.append(_Record(t, parents, grad_fn))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), grad_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0  # subgradient 0 at exactly 0
    # NaN inputs stay NaN so corrupted weights surface as a non-finite loss
    return _make(np.where(mask | np.isnan(x.data), x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid_backward(out: np.ndarray, g: np.ndarray, live: np.ndarray) -> np.ndarray:
    return g * out * (1.0 - out) * live


def sigmoid(x) -> Tensor:
    """Logistic function, saturated (zero slope) for ``|x| > SIGMOID_CLAMP``."""
    x = as_tensor(x)
    z = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    live = np.abs(x.data) <= SIGMOID_CLAMP
    # looked up at call time so fixtures can patch the derivative
    return _make(out, (x,), lambda g: (_sigmoid_backward(out, g, live),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.maximum(a.data, b.data),  # propagates NaN
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def floor_at(x, lo: float) -> Tensor:
    """``max(x, lo)`` for a constant floor; zero gradient where floored."""
    x = as_tensor(x)
    keep = ~(x.data < lo)  # NaN is kept, not floored
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), grad_fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), grad_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, grad_fn)


# ---------------------------------------------------------------------------


def backward(root: Tensor, tape: GradientTape, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode pass from a scalar ``root`` recorded on ``tape``.

    Returns a mapping leaf -> gradient tensor (same shape as the leaf). When
    ``leaves`` is given, exactly those tensors are returned, with zero
    gradients for any not reachable from ``root``; otherwise every
    grad-requiring input of the recorded operations is returned.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced: set[int] = set()
    found: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.grad_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            found.setdefault(key, parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    if leaves is None:
        leaves = [t for k, t in found.items() if k not in produced]
    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        out[leaf] = Tensor._wrap(np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64), False)
    return out


# ---------------------------------------------------------------------------
# parameter records and Adam

Params = dict[str, np.ndarray]


def leaves_of(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a parameter record as grad-requiring leaf tensors."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def gradients(loss: Tensor, tape: GradientTape, leaves: Mapping[str, Tensor]) -> Params:
    g = backward(loss, tape, leaves.values())
    return {k: g[t].data for k, t in leaves.items()}


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise DimensionError(f"gradient for {k!r} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new = AdamState({}, {}, t, b1, b2, state.eps)
    out: Params = {}
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new.m[k], new.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, new
