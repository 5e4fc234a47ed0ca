"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` is a rows x cols matrix that may carry leading batch axes.
Every operation broadcasts over those axes the way numpy does, and the
backward pass sums gradients back down to each operand's own shape, so a
2-D parameter shared by every sample in a batch receives one accumulated
gradient.

Operations are recorded only while a :class:`Tape` is active and at least one
operand requires a gradient::

    with Tape() as tape:
        loss = mean(abs_(sub(matmul(x, w.value), y)))
    tape.backward(loss)
    w.value.grad  # d loss / d w
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, OracleError, TapeError

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Param:
    """Named model parameter. Non-trainable params never receive gradients."""

    name: str
    value: Tensor
    trainable: bool = True

    def __post_init__(self):
        if not isinstance(self.value, Tensor):
            self.value = Tensor(self.value)
        self.value.requires_grad = self.trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.data.size


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of executed operations.

    ``backward`` replays the record in exact reverse order and may be called
    once; a fresh forward pass needs a fresh tape.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape whose backward pass already ran")
        self.nodes.append(_Node(out, tuple(parents), backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; run a new forward pass first")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate(parent, pg)
        self.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        # backward closures never write into gradient arrays, so sharing is safe
        t.grad = g
    else:
        t.grad = t.grad + g


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it if any parent needs a gradient.

    ``backward`` maps the output gradient to a tuple with one entry per parent
    (``None`` for parents that get nothing).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Param):
        return x.value
    return Tensor(x)


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.value.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def total(a: Tensor) -> Tensor:
    """Sum of every entry, as a scalar tensor."""
    shape = a.data.shape
    return make_node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.data.shape, a.data.size
    return make_node(np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def abs_(a: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at a kink
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_node(out, (a,), lambda g: (g * sig,))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def modulus(re: Tensor, im: Tensor) -> Tensor:
    """Complex modulus sqrt(re^2 + im^2); zero subgradient at the origin."""
    r = np.hypot(re.data, im.data)
    safe = np.where(r > 0, r, 1.0)

    def backward(g):
        w = np.where(r > 0, g / safe, 0.0)
        return w * re.data, w * im.data

    return make_node(r, (re, im), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return make_node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    return make_node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g,))


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of every matrix in ``a``."""
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return make_node(a.data[..., start:stop, :].copy(), (a,), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError(f"concat_cols needs equal row counts, got {a.shape} and {b.shape}")
    p = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return make_node(out, (a, b), lambda g: (g[..., :p], g[..., p:]))


# ---------------------------------------------------------------------------
# linear algebra


def _check_matmul(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"{what}: cannot multiply shapes {a.shape} and {b.shape}")


def _weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # x: (..., m, k), g: (..., m, n) -> (k, n) summed over every leading axis
    k, n = x.shape[-1], g.shape[-1]
    return x.reshape(-1, k).T @ g.reshape(-1, n)


def _rowwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (..., m, k) @ (k, n) as one 2-D product; much faster than batched matmul
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    _check_matmul(ad, bd, "matmul")
    weight = bd.ndim == 2 and ad.ndim > 2

    def backward(g):
        if weight:
            return _rowwise(g, bd.T), _weight_grad(ad, g)
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_node(_rowwise(ad, bd) if weight else ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Param | Tensor, bias: Param | Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ W + bias``."""
    wt = as_tensor(w)
    xd, wd = x.data, wt.data
    _check_matmul(xd, wd, "linear")
    out = _rowwise(xd, wd)
    if bias is None:
        parents = (x, wt)
    else:
        bt = as_tensor(bias)
        if bt.data.shape[-1] != wd.shape[-1]:
            raise DimensionError(f"linear: bias shape {bt.shape} does not match weight {wt.shape}")
        out = out + bt.data
        parents = (x, wt, bt)

    def backward(g):
        gx = _rowwise(g, wd.T)
        gw = _weight_grad(xd, g)
        if bias is None:
            return gx, gw
        return gx, gw, g

    return make_node(out, parents, backward)


def softmax_rows_with_bias(scores: Tensor, bias: Tensor) -> Tensor:
    """Row-wise softmax of ``scores + bias`` (bias broadcasts over batch axes)."""
    sd, bd = scores.data, bias.data
    if sd.shape[-2:] != bd.shape[-2:]:
        raise DimensionError(f"softmax_rows_with_bias: scores {sd.shape} vs bias {bd.shape}")
    z = sd + bd
    if not np.isfinite(z).all():
        raise NumericError("softmax_rows_with_bias received non-finite scores or bias")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return gz, gz

    return make_node(p, (scores, bias), backward)


def layer_norm(x: Tensor, gain: Param | Tensor, shift: Param | Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply gain/shift."""
    gt, st = as_tensor(gain), as_tensor(shift)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gt.data + st.data

    def backward(g):
        gh = g * gt.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return make_node(out, (x, gt, st), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Param | Tensor],
    step: float = 1e-4,
    abs_floor: float = 1e-6,
    details: dict | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` must be a deterministic scalar function of the current parameter
    values (dropout off). Entries where both gradients are below ``abs_floor``
    in magnitude are compared by absolute error instead.
    """
    tensors, names = [], []
    for i, p in enumerate(params):
        if isinstance(p, Param):
            if not p.trainable:
                continue
            tensors.append(p.value)
            names.append(p.name)
        else:
            tensors.append(p)
            names.append(f"tensor{i}")
    for t in tensors:
        t.grad = None
        t.requires_grad = True

    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    base = float(f().data)
    if float(f().data) != base:
        raise OracleError("function is not deterministic; disable dropout before checking")

    worst = 0.0
    for name, t, ga in zip(names, tensors, analytic):
        arr = t.data
        local = 0.0
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            fp = float(f().data)
            arr.flat[i] = orig - step
            fm = float(f().data)
            arr.flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            ana = ga.flat[i]
            mag = max(abs(num), abs(ana))
            err = abs(num - ana) if mag < abs_floor else abs(num - ana) / mag
            local = max(local, err)
        if details is not None:
            details[name] = local
        worst = max(worst, local)
    return worst
