"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the CDT-II network are provided. Ops record a
node on the active :class:`Tape` whenever one of their inputs requires a
gradient; outside a tape they run as plain numpy computations.

Broadcasting is limited to leading (batch) dimensions: the operand with fewer
dimensions must match the trailing shape of the other, with size-1 leading
axes allowed for batch broadcasting in :func:`matmul`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "tensor_sum",
    "mse",
    "multi_head_attention",
    "backward",
    "finite_difference_gradient",
    "GELU_COEF",
    "GELU_SCALE",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates an op precondition."""


class ContractError(ValueError):
    """A call violates a documented contract."""


class Tensor:
    """Row-major numeric array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded in execution order, which is a valid topological order.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def reset(self) -> None:
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading batch dims")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record((a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record((a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record((a, b), ad * bd, bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable scalar."""
    c = float(c)
    return _record((x,), x.data * x.data.dtype.type(c), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _record((a, b), ad @ bd, bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record((x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record((x,), x.data.reshape(tuple(shape)), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(xs, np.concatenate([t.data for t in xs], axis=axis), bw)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _record((x,), np.asarray(x.data.sum(), dtype=dtype), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element; ``target`` is treated as constant."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def bw(g):
        return (g * (2.0 / n) * diff, np.zeros_like(target.data))

    return _record((pred, target), out, bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ConfigError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _record((x,), y, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record((x, gain, bias), xhat * gd + bias.data, bw)


# tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SCALE = math.sqrt(2.0 / math.pi)
GELU_COEF = 0.044715


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    x2 = xd * xd
    t = np.tanh(xd * (GELU_SCALE + (GELU_SCALE * GELU_COEF) * x2))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = GELU_SCALE + (3.0 * GELU_SCALE * GELU_COEF) * x2
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record((x,), y.astype(xd.dtype, copy=False), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    # byte-resolution keep mask: drop probability is round(256 p) / 256
    cut = min(255, int(round(256 * p)))
    raw = np.frombuffer(rng.bytes(x.data.size), dtype=np.uint8).reshape(x.shape)
    mask = np.multiply(raw >= cut, 256.0 / (256 - cut), dtype=x.dtype)
    return _record((x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def multi_head_attention(q, k, v, params: dict, heads: int, dropout_p: float = 0.0,
                         training: bool = False, rng: np.random.Generator | None = None):
    """Multi-head scaled dot-product attention.

    ``q`` is ``[..., Lq, d]``; ``k`` and ``v`` are ``[..., Lk, d]``. ``params``
    holds ``wq, bq, wk, bk, wv, bv, wo, bo`` with ``w*`` of shape ``[d, d]``.
    Each head uses scale ``1/sqrt(d/heads)``.

    Returns ``(out [..., Lq, d], weights [..., heads, Lq, Lk])``; the weights
    are the softmax output before attention dropout.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ConfigError(f"attention dims disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // heads
    lq, lk = q.shape[-2], k.shape[-2]

    def split(t, length):
        t = reshape(t, t.shape[:-2] + (length, heads, dh))
        n = t.ndim
        return transpose(t, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))

    qh = split(scale(_linear(q, params["wq"], params["bq"]), 1.0 / math.sqrt(dh)), lq)
    kh = split(_linear(k, params["wk"], params["bk"]), lk)
    vh = split(_linear(v, params["wv"], params["bv"]), lk)
    n = kh.ndim
    kt = transpose(kh, tuple(range(n - 2)) + (n - 1, n - 2))
    scores = matmul(qh, kt)
    weights = softmax(scores, axis=-1)
    attn = dropout(weights, dropout_p, rng, training)
    ctx = matmul(attn, vh)
    m = ctx.ndim
    ctx = transpose(ctx, tuple(range(m - 3)) + (m - 2, m - 3, m - 1))
    ctx = reshape(ctx, ctx.shape[:-2] + (d,))
    return _linear(ctx, params["wo"], params["bo"]), weights


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf that requires grad, then reset the tape.

    Grads are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    for key, t in leaves.items():
        if key not in produced:
            t.grad = np.asarray(grads.get(key, np.zeros_like(t.data)), dtype=t.dtype).reshape(t.shape)
    tape.reset()


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5,
                               indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``f`` must read ``x.data`` at call time. When ``indices`` is given only
    those entries are computed; the rest of the result is NaN.
    """
    base = x.data
    out = np.full(base.shape, np.nan, dtype=np.float64)
    idx_iter = np.ndindex(base.shape) if indices is None else indices
    for idx in idx_iter:
        orig = base[idx]
        base[idx] = orig + h
        fp = float(f(x))
        base[idx] = orig - h
        fm = float(f(x))
        base[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out
