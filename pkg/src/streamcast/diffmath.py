"""Dense float64 tensors with reverse-mode differentiation.

Storage and kernels are numpy; the graph, the backward rules and the
optimizer are implemented here.  The op set is closed: every op below has a
paired finite-difference test in ``tests/test_diffmath.py``.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference)."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def grad_enabled() -> bool:
    # per thread, so inference workers cannot switch tracking off elsewhere
    return getattr(_STATE, "enabled", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

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
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, opname: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {opname}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def tabs(x) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)

    def backward(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),)

    return _make(out, (x,), backward, "softplus")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------- reductions / shape


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    """Basic slicing and integer-array gathering."""
    x = as_tensor(x)
    out = x.data[index]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis)


# ---------------------------------------------------------------- fused ops


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def logsumexp(x, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with a max shift; axis is reduced."""
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - shift).sum(axis=axis, keepdims=True)
    out = (np.log(s) + shift).squeeze(axis)

    def backward(g):
        w = np.exp(x.data - shift) / s
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (x,), backward, "logsumexp")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        n = x.shape[-1]
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(x)
    keep = (rng.random(as_tensor(x).shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def attention(q, k, v, mask=None) -> Tensor:
    """Scaled dot-product attention composed from primitive ops.

    ``q``: (..., Lq, dh), ``k``/``v``: (..., Lk, dh).  ``mask`` is an
    additive array broadcastable to (..., Lq, Lk) holding 0 or a large
    negative value.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        logits = logits + mask
    return matmul(softmax(logits, axis=-1), v)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from every leaf tensor with ``requires_grad`` (the
    parameters) to its gradient.  Parameters are not modified.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError("non-finite gradient during backward")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------- optimization


@dataclass
class OptimizerState:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, rate: float) -> tuple[dict[str, Tensor], OptimizerState]:
    """One AdamW update with decoupled weight decay.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient.  Parameter arrays are replaced, never mutated in place.
    """
    if rate < 0:
        raise ValueError("rate must be non-negative")
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        decayed = p.data * (1.0 - rate * state.weight_decay)
        p.data = decayed - rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LRSchedule:
    initial: float
    total: int
    floor: float = 0.0

    def __post_init__(self):
        if self.initial <= 0 or self.total <= 0 or self.floor < 0:
            raise ValueError("invalid schedule")


def cosine_rate(step: int, schedule: LRSchedule) -> float:
    if not 0 <= step <= schedule.total:
        raise ValueError(f"step {step} outside [0, {schedule.total}]")
    c = (1.0 + math.cos(math.pi * step / schedule.total)) / 2.0
    return schedule.floor + (schedule.initial - schedule.floor) * c


# ---------------------------------------------------------------- checking


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x`` (in place probe)."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max relative error with an absolute floor for near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
