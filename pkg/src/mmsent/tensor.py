"""
Dense tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation remembers its parents and a closure that
maps the output gradient to parent gradients. Node ids come from a global
monotone counter, so a parent always has a smaller id than its child and
``backward`` can process nodes in strictly decreasing id order.

Storage is a numpy array. Precision defaults to float32; wrap gradient checks
in ``precision(np.float64)``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import GradientStateError, ParameterError, PreconditionError, ShapeError

_default_dtype = np.float32
_ids = itertools.count()

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating-point precision."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


# --------------------------------------------------------------------------- #
# Random numbers
# --------------------------------------------------------------------------- #


def _splitmix64(x: int) -> int:
    z = (x + _GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _shape(shape) -> tuple:
    return (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(int(d) for d in shape)


class Rng:
    """SplitMix64 stream.

    Output ``i`` (1-based) is the SplitMix64 finalizer applied to
    ``seed + i * 0x9E3779B97F4A7C15 mod 2**64``, which is exactly the sequence
    produced by the reference sequential SplitMix64 generator. Because each
    output depends only on (seed, position), whole blocks are generated with
    vectorized wrapping uint64 arithmetic and the stream is bit-identical on
    every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.position = 0

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream keyed by integers (e.g. purpose, epoch)."""
        s = self.seed
        for k in keys:
            s = _splitmix64(s ^ ((int(k) * _MIX1) & MASK64))
        return Rng(s)

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Float64 samples in [low, high) built from the top 53 bits."""
        shape = _shape(shape)
        n = int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller transform of two uniform streams."""
        shape = _shape(shape)
        n = int(np.prod(shape))
        u1 = 1.0 - self.uniform((n,))
        u2 = self.uniform((n,))
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in [low, high); modulo bias is below 2**-50 for small ranges."""
        shape = _shape(size)
        n = int(np.prod(shape))
        span = np.uint64(high - low)
        return (self.next_u64(n) % span).astype(np.int64).reshape(shape) + low

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")


# --------------------------------------------------------------------------- #
# Tensor
# --------------------------------------------------------------------------- #


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_ids)
        self.op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._id = next(_ids)
        out.op = op
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------- #
# Elementwise and structural ops
# --------------------------------------------------------------------------- #


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return Tensor._from_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "scale")
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is shared across every leading index of ``a``, which
    is how dense layers apply one weight matrix to a whole batch.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, bw, "stack")


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is removed)."""
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return Tensor._from_op(out, (x,), bw, "take")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._from_op(table.data[ids], (table,), bw, "embedding")


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, (x,), bw, "sum")


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis), 1.0 / float(n))


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis 1 of ``x`` [B, L, d] restricted to rows where ``mask`` [B, L] is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence shape {x.shape[:2]}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise PreconditionError("mean pooling needs at least one valid position per sequence")
    w = (mask / counts[:, None]).astype(x.dtype)[:, :, None]
    # padded rows must not leak even if they hold inf/nan
    masked = np.where(mask[:, :, None], x.data, 0)
    out = (masked * w).sum(axis=1)
    return Tensor._from_op(out, (x,), lambda g: (g[:, None, :] * w,), "masked_mean")


# --------------------------------------------------------------------------- #
# Nonlinearities and normalization
# --------------------------------------------------------------------------- #


def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._from_op(out, (x,), lambda g: (_relu_grad(x.data, g),), "relu")


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_grad(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    y = _softmax_np(x.data, axis)
    return Tensor._from_op(y, (x,), lambda g: (_softmax_grad(y, g, axis),), "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain * x + bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[Rng]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so inference is the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an Rng")
    keep = rng.uniform(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``, via log-sum-exp."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [B, C] and targets [B], got {logits.shape} and {targets.shape}")
    n_classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"target class out of range 0..{n_classes - 1}")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray((lse - z[rows, targets]).mean(), dtype=logits.dtype)

    def bw(g):
        grad = _softmax_np(logits.data, 1)
        grad[rows, targets] -= 1.0
        return (grad * (g / b),)

    return Tensor._from_op(loss, (logits,), bw, "cross_entropy")


# --------------------------------------------------------------------------- #
# Backward pass
# --------------------------------------------------------------------------- #


def _reachable(root: Tensor) -> list:
    seen = {root._id: root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for p in node._parents:
            if p._id not in seen:
                seen[p._id] = p
                stack_.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    The graph is released afterwards; calling backward again on it raises,
    as does running backward while a leaf still holds a gradient from an
    earlier pass (call ``zero_grad`` first).
    """
    if loss.size != 1:
        raise GradientStateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientStateError("graph already consumed by a previous backward() call")
    if not loss.requires_grad:
        raise GradientStateError("loss does not depend on any tensor that requires grad")
    nodes = _reachable(loss)
    for node in nodes:
        if node._consumed:
            raise GradientStateError("graph already consumed by a previous backward() call")
        if node.is_leaf and node.requires_grad and node.grad is not None:
            raise GradientStateError("leaf already holds a gradient; call zero_grad() before backward()")

    grads = {loss._id: np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(node._id, None)
        if node.is_leaf:
            if node.requires_grad and g is not None:
                node.grad = g.astype(node.dtype, copy=False)
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------- #
# Finite differences
# --------------------------------------------------------------------------- #


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of scalar ``f(x)`` at the given flat coordinates of ``x``.

    ``x.data`` is perturbed in place and restored.
    """
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        xp = float(flat[i])
        fp = float(f(x).data)
        flat[i] = orig - h
        xm = float(flat[i])
        fm = float(f(x).data)
        flat[i] = orig
        # divide by the step actually taken after rounding to x's dtype
        out.append((fp - fm) / (xp - xm))
    return np.array(out)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, coords=None,
                      floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences for ``x``.

    ``f`` must be deterministic (dropout disabled) and return a scalar tensor.
    """
    if not x.requires_grad:
        raise ParameterError("finite_diff_check needs a tensor with requires_grad=True")
    loss = f(x)
    leaves = [n for n in _reachable(loss) if n.is_leaf]
    zero_grad(leaves)
    backward(loss)
    analytic_all = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
    zero_grad(leaves)
    coords = list(range(x.size)) if coords is None else list(coords)
    numeric = numeric_grad(f, x, h, coords)
    err = relative_error(analytic_all[coords], numeric, floor)
    return float(err.max()) if err.size else 0.0
