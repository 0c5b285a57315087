"""Dense tensors on top of numpy with a small tape-based reverse-mode autodiff.

Only the operations the toy model and the SSM kernels need are provided.
Values are stored as float32 (compute) or float64 (verification); every op
keeps the dtype of its inputs.

Recording happens only inside an active :class:`GradTape` and only for ops
that touch a tensor with ``requires_grad=True``::

    with GradTape() as tape:
        loss = sum_(mul(w, w))
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _raise_scalar():
    raise ShapeError("item() needs a single-element tensor")


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_LOCAL = threading.local()


def _active() -> list["GradTape"]:
    # tapes are per thread, so shards of a batch can be recorded concurrently
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


class GradTape:
    """Records differentiable ops in execution order (already topological)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _active().append(self)
        return self

    def __exit__(self, *exc):
        _active().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def recording(inputs: Sequence[Tensor]) -> bool:
    """True when an op on ``inputs`` would be put on the active tape."""
    return bool(_active()) and any(t.requires_grad for t in inputs)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data``; attach a backward rule when a tape is listening."""
    needs = recording(inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _active()[-1].nodes.append(_Node(out, tuple(inputs), vjp))
    return out


class Gradients(dict):
    """Maps tensors (by identity) to their adjoint arrays."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(t))

    def get(self, t: Tensor, default=None):
        return dict.get(self, id(t), default)

    def __contains__(self, t) -> bool:
        return dict.__contains__(self, id(t))


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor] | None = None) -> Gradients:
    """Replay ``tape`` in reverse from a scalar ``loss``.

    Returns adjoints for every recorded node input that requires grad; leaf
    tensors in ``params`` (if given) also get ``.grad`` set, zero-filled when
    the loss does not reach them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"adjoint shape {gi.shape} != value shape {t.shape}")
            k = id(t)
            if k in adj:
                adj[k] = adj[k] + gi
            else:
                adj[k] = gi
    out = Gradients()
    for k, g in adj.items():
        dict.__setitem__(out, k, g)
    if params is not None:
        for p in params:
            p.grad = out.get(p)
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.data, b.data
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xv = x.data
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_array(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x) without overflow: max(x, 0) + log1p(e^-|x|)."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x: Tensor) -> Tensor:
    xv = x.data
    return _record(softplus_array(xv), (x,), lambda g: (g * sigmoid_array(xv),))


def silu(x: Tensor) -> Tensor:
    xv = x.data
    s = sigmoid_array(xv)
    return _record(xv * s, (x,), lambda g: (g * (s * (1.0 + xv * (1.0 - s))),))


def _phi1_array(z: np.ndarray, with_grad: bool = True):
    """(e^z - 1)/z, its derivative and e^z - 1, with series terms near zero."""
    z = np.asarray(z)
    if z.ndim == 0:
        val, der, em1 = _phi1_array(z.reshape(1), with_grad)
        return val[0], None if der is None else der[0], em1[0]
    small = np.abs(z) < 1e-6
    any_small = bool(small.any())
    zs = np.where(small, 1.0, z).astype(z.dtype, copy=False) if any_small else z
    em1 = np.expm1(zs)
    val = em1 / zs
    der = None
    if with_grad:
        # d/dz [(e^z - 1)/z] = (z e^z - e^z + 1)/z^2 = (e^z - val)/z
        der = (em1 + 1.0 - val) / zs
    if any_small:
        zz = z[small]
        val[small] = 1.0 + zz / 2.0 + zz * zz / 6.0
        if with_grad:
            der[small] = 0.5 + zz / 3.0
        em1 = np.expm1(z)
    return val, der, em1


def phi1(z: Tensor) -> Tensor:
    """Elementwise (e^z - 1)/z; the ZOH input-gain factor for diagonal A."""
    val, der, _ = _phi1_array(z.data)
    return _record(val, (z,), lambda g: (g * der,))


def rsqrt(x: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(x.data)
    return _record(y, (x,), lambda g: (-0.5 * g * y * y * y,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _record(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def take(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters back with accumulation."""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.asarray(x.data[idx]), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal batch dims."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"shape mismatch in matmul batch dims: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _record(av @ bv, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    return mul(mul(x, rsqrt(add(ms, eps))), weight)


# ---------------------------------------------------------------------------
# fused kernels


def linear_recurrence(decay: Tensor, drive: Tensor, axis: int = 1) -> Tensor:
    """h[t] = decay[t] * h[t-1] + drive[t] along ``axis`` with h[-1] = 0.

    Returns the full state history. The adjoint runs the same recurrence
    backwards in time: g[t] = dH[t] + decay[t+1] * g[t+1].
    """
    if decay.shape != drive.shape:
        raise ShapeError(f"decay {decay.shape} vs drive {drive.shape}")
    a = np.moveaxis(decay.data, axis, 0)
    u = np.moveaxis(drive.data, axis, 0)
    n = a.shape[0]
    hist = np.empty_like(u)
    h = np.zeros_like(u[0])
    for t in range(n):
        np.multiply(a[t], h, out=h)
        h += u[t]
        hist[t] = h

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        ga = np.empty_like(hist)
        gu = np.empty_like(hist)
        acc = np.zeros_like(hist[0])
        for t in range(n - 1, -1, -1):
            acc += g[t]
            gu[t] = acc
            if t > 0:
                ga[t] = acc * hist[t - 1]
            else:
                ga[t] = 0.0
            acc = acc * a[t]
        return np.moveaxis(ga, 0, axis), np.moveaxis(gu, 0, axis)

    return _record(np.moveaxis(hist, 0, axis), (decay, drive), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=-1, keepdims=True)
    logp = z - zmax - np.log(denom)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = ez / denom
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), vjp)


def finite_or_raise(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"nonfinite values in {what}")


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    """x with softplus(x) == y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "ShapeError",
    "backward",
    "add",
    "sub",
    "mul",
    "exp",
    "log",
    "softplus",
    "softplus_array",
    "softplus_inverse",
    "sigmoid_array",
    "silu",
    "phi1",
    "rsqrt",
    "sum_",
    "mean",
    "reshape",
    "swapaxes",
    "flip",
    "take",
    "concat",
    "matmul",
    "linear",
    "rms_norm",
    "linear_recurrence",
    "cross_entropy",
    "finite_or_raise",
]
