"""Dense numpy tensors with reverse-mode gradients.

Every differentiable op records its inputs and a closure that maps the output
gradient to input gradients. ``Tensor.backward`` replays those closures in
reverse topological order. Training runs in float32; gradient checks switch the
default dtype to float64 with :func:`default_dtype`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = {"dtype": np.dtype(np.float32), "grad": True}


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _STATE["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    _STATE["dtype"] = dt


@contextlib.contextmanager
def default_dtype(dtype):
    old = _STATE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


def grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_STATE["dtype"])
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # basic properties ------------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # autodiff --------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._prev, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            node._prev = ()
            node._backward = None

    # operator sugar ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _STATE["dtype"]))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_STATE["dtype"]), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b if np.isscalar(b) else np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), back)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout. ``p == 0`` or ``training=False`` returns ``a`` unchanged."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _result(y, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def back(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), back)


slice_ = getitem


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along {axis}: shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(y, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back into the touched rows."""
    ids = np.asarray(ids, dtype=np.int64)
    n, dtype = weight.shape, weight.dtype
    if ids.size and (ids.min() < 0 or ids.max() >= n[0]):
        raise ShapeError(f"embedding ids outside [0, {n[0]})")

    def back(g):
        z = np.zeros(n, dtype=dtype)
        flat = ids.reshape(-1)
        gf = g.reshape(flat.size, n[1])
        uniq, inv = np.unique(flat, return_inverse=True)
        acc = np.zeros((uniq.size, n[1]), dtype=dtype)
        np.add.at(acc, inv, gf)
        z[uniq] = acc
        return (z,)

    return _result(weight.data[ids], (weight,), back)


embedding_lookup = embedding


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    y = x - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), back)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = None if gain is None else gain.data
    y = xhat if gd is None else xhat * gd
    if bias is not None:
        y = y + bias.data
    parents = [a] + [t for t in (gain, bias) if t is not None]

    def back(g):
        gx = g if gd is None else g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        out = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            out.append((g * xhat).sum(axis=lead).reshape(gain.shape))
        if bias is not None:
            out.append(g.sum(axis=lead).reshape(bias.shape))
        return out

    return _result(y, parents, back)


def cross_entropy_logits(
    logits: Tensor,
    targets,
    smoothing: float = 0.0,
    ignore_index: int | None = None,
    allowed: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Label-smoothed cross entropy over the last axis.

    Per token: ``(1 - eps) * NLL(target) + eps * mean_j NLL(j)``, where the mean
    runs over ``allowed`` tokens when a boolean mask is given (disallowed tokens
    are excluded from the softmax as well). ``ignore_index`` positions contribute
    nothing; ``reduction="mean"`` averages over the remaining tokens.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    x = logits.data
    v = x.shape[-1]
    flat = x.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size != flat.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    keep = np.ones(t.size, dtype=bool) if ignore_index is None else t != ignore_index
    tt = np.where(keep, t, 0)
    if allowed is not None:
        allow = np.asarray(allowed, dtype=bool).reshape(-1, v)
        flat = np.where(allow, flat, -np.inf)
        counts = allow.sum(axis=1)
    else:
        allow = None
        counts = np.full(t.size, v)
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=1, keepdims=True)
    logp = flat - m - np.log(z)
    p = e / z
    rows = np.arange(t.size)
    nll = -logp[rows, tt]
    if allow is None:
        smooth = -logp.mean(axis=1)
    else:
        smooth = -np.where(allow, logp, 0.0).sum(axis=1) / counts
    per = ((1.0 - smoothing) * nll + smoothing * smooth) * keep
    n_keep = max(int(keep.sum()), 1)

    def back(g):
        q = np.zeros_like(p)
        q[rows, tt] = 1.0 - smoothing
        if allow is None:
            q += smoothing / v
        else:
            q += smoothing * allow / counts[:, None]
        d = p - q
        if allow is not None:
            d = np.where(allow, d, 0.0)
        w = keep.astype(x.dtype)
        if reduction == "mean":
            w = w * (float(g) / n_keep)
        else:
            w = w * g.reshape(-1)
        return ((d * w[:, None]).astype(x.dtype).reshape(x.shape),)

    if reduction == "mean":
        val = np.asarray(per.sum() / n_keep, dtype=x.dtype)
    elif reduction == "none":
        val = per.astype(x.dtype).reshape(np.shape(targets))
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _result(val, (logits,), back)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(
    f: Callable[[], float],
    params: Iterable[Tensor],
    h: float = 1e-5,
    coords: dict[int, Sequence[tuple[int, ...]]] | None = None,
) -> list[np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every (or selected) coordinate.

    ``f`` re-evaluates the loss from the current parameter values and must be
    deterministic. Parameters must already be float64. ``coords`` maps a
    parameter's position in ``params`` to the flat coordinates to probe; other
    coordinates of that parameter are left at zero in the returned estimate.
    """
    params = list(params)
    out = []
    with no_grad():
        for k, p in enumerate(params):
            if p.dtype != np.float64:
                raise ContractError("finite differences require float64 parameters")
            est = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            idx = range(flat.size) if coords is None or k not in coords else coords[k]
            for i in idx:
                i = int(np.ravel_multi_index(i, p.shape)) if isinstance(i, tuple) else int(i)
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f())
                flat[i] = orig - h
                fm = float(f())
                flat[i] = orig
                est.reshape(-1)[i] = (fp - fm) / (2.0 * h)
            out.append(est)
    return out


def relative_error(ad: np.ndarray, fd: np.ndarray) -> float:
    """``max|ad - fd| / (max|fd| + 1e-8)``."""
    return float(np.max(np.abs(ad - fd)) / (np.max(np.abs(fd)) + 1e-8))
