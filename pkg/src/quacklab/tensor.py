"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a ``with Tape():`` block nothing
is recorded, which is how telemetry and evaluation run without touching
training state.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

DTYPES = {"double": np.float64, "single": np.float32}

_tape_stack: list["Tape"] = []
_leaf_ids = itertools.count()


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class Node:
    __slots__ = ("inputs", "output", "vjp", "tape")

    def __init__(self, inputs, output, vjp, tape):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction; :func:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 precision: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is not None:
            arr = np.asarray(data, dtype=DTYPES[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        if requires_grad and name is None:
            name = f"leaf{next(_leaf_ids)}"
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _tape_stack and any(t.requires_grad for t in inputs):
        tape = _tape_stack[-1]
        out.requires_grad = True
        node = Node(tuple(inputs), out, vjp, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _record(out, (x,), lambda g: (g * (sig + out * (1.0 - sig)),))


def embedding(weight, ids) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    rows = weight.shape[0]

    def vjp(g):
        gw = np.zeros((rows,) + g.shape[ids.ndim:], dtype=g.dtype)
        np.add.at(gw, ids, g)
        return (gw,)

    return _record(weight.data[ids], (weight,), vjp)


# ---------------------------------------------------------------------------
# attention-specific ops


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean, True where an entry is visible.  Hidden entries come
    out exactly 0.  A row with no visible entry raises DegenerateRowError.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), vjp)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain = as_tensor(x), as_tensor(gain)
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def vjp(g):
        gg = _unbroadcast(g * xhat, gd.shape)
        gh = g * gd
        gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg

    return _record(xhat * gd, (x, gain), vjp)


def rope_angles(positions, d_r: int, theta_base: float = 10000.0) -> np.ndarray:
    if d_r % 2:
        raise DimensionError(f"rope dimension must be even, got {d_r}")
    if theta_base <= 0:
        raise ValueError("theta_base must be positive")
    freqs = theta_base ** (-2.0 * np.arange(d_r // 2) / d_r)
    return np.multiply.outer(np.asarray(positions, dtype=np.float64), freqs)


def _rotate(xd: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(x, position, theta_base: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs (2i, 2i+1) by position * theta_base**(-2i/d).

    ``position`` is a scalar or an array broadcasting against the leading
    axes of ``x`` (typically one position per row of a (..., s, d) tensor).
    """
    x = as_tensor(x)
    d_r = x.shape[-1]
    ang = rope_angles(position, d_r, theta_base)
    cos, sin = np.cos(ang).astype(x.data.dtype), np.sin(ang).astype(x.data.dtype)
    return _record(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    z = logits.data
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size
    loss = -picked.sum() / n

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (g / n),)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf on its tape.

    Returns a mapping from leaf name to gradient array.  Accumulation order is
    the reverse tape order, so repeated calls are bit-identical.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ValueError("loss was not computed on an active tape")
    tape = loss._node.tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                key = id(inp)
                leaves[key] = inp
                leaf_grads[key] = leaf_grads[key] + gi if key in leaf_grads else gi
            else:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
    return {leaves[k].name: leaf_grads[k] for k in leaves}


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
               floor: float | None = None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps leaf Tensors to a scalar Tensor.  The step for element x is
    ``h * max(1, |x|)``.  Errors are |analytic - numeric| / max(|analytic|,
    |numeric|, floor); the default floor, 1e-3 * max(1, |f|), sits well above
    the difference quotient's rounding noise (about eps * |f| / h), so
    near-zero gradient entries are judged on absolute error instead of
    dividing noise by noise.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True, name=f"input{i}") for i, a in enumerate(arrays)]
    with Tape():
        out = f(*leaves)
    grads = backward(out)
    if floor is None:
        floor = 1e-3 * max(1.0, abs(float(out.data)))

    def evaluate(vals):
        return float(f(*[Tensor(v) for v in vals]).data)

    worst = 0.0
    for i, arr in enumerate(arrays):
        analytic = grads.get(f"input{i}", np.zeros_like(arr)).reshape(-1)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            step = h * max(1.0, abs(orig))
            flat[j] = orig + step
            up = evaluate(arrays)
            flat[j] = orig - step
            down = evaluate(arrays)
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[j]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
