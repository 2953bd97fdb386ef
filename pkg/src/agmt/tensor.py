"""Minimal reverse-mode autodiff over dense float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
attaches a closure mapping the output gradient to one gradient per input.
Nodes carry a monotonically increasing sequence number, so replaying nodes in
descending sequence order is a valid reverse-topological traversal.

Shapes are never broadcast implicitly. The one exception is the bias add inside
``conv1x1``/``conv3x3_circular``; anything else goes through ``expand``.
Ops accept optional leading batch axes where that is noted.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, DomainError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]
_seq = itertools.count()
_grad_enabled = True

# ops whose derivative is discontinuous at 0; finite-difference checks must stay away from them
KINK_OPS = frozenset({"relu", "hinge", "l2_norm_rows"})


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "seq", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, *, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.seq = next(_seq)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(x, shape: tuple) -> Tensor:
    """Python scalars become constant tensors of ``shape``; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) == 0:
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out.op = op
    out.seq = next(_seq)
    out._parents = ()
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _operands(a, b) -> tuple:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return _lift(a, b.shape), b
    a = as_tensor(a)
    return a, _lift(b, a.shape)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tape:
    """Ordered record of the nodes reachable from a loss, in execution order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = {id(loss)}
        stack = [loss]
        nodes = []
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def replay(self, loss: Tensor) -> None:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    Tape.from_loss(loss).replay(loss)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either operand may carry leading batch axes; when both do
    they must match, and a 2-D operand is shared across the other's batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ _swap(bv)
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
        if b.requires_grad:
            if b.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(av) @ g
        return ga, gb

    return _node(av @ bv, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; ``axes=None`` swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules); backward sums."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(out, (x,), bw, "expand")


def take(x: Tensor, indices: ArrayLike, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _node(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    axis = axis % xs[0].ndim
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    return _node(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _same_shape(a, b, "div")
    av, bv = a.data, b.data
    out = av / bv
    return _node(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log: input has non-positive entries (min {x.data.min():.6g})")
    xv = x.data
    return _node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def hinge(x: Tensor) -> Tensor:
    """``[x]_+``; the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "hinge")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + e^x)`` evaluated as ``logaddexp(0, x)``: exact, no clamping."""
    xv = x.data
    sig = np.exp(-np.logaddexp(0.0, -xv))
    return _node(np.logaddexp(0.0, xv), (x,), lambda g: (g * sig,), "softplus")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _node(x.data.sum(axis=axes), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _node(x.data.mean(axis=axes), (x,), bw, "mean")


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis. Zero rows get a zero subgradient."""
    xv = x.data
    n = np.sqrt((xv * xv).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, (g / safe)[..., None] * xv, 0.0),)

    return _node(n, (x,), bw, "l2_norm_rows")


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows by default) with max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolutions, input layout [..., H, W, C]
# ---------------------------------------------------------------------------

def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position affine map over the channel axis: ``x @ W + b``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"conv1x1: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"conv1x1: bias {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.data, weight.data
    c, d = wv.shape

    def bw(g):
        g2 = g.reshape(-1, d)
        gx = (g2 @ wv.T).reshape(xv.shape) if x.requires_grad else None
        gw = xv.reshape(-1, c).T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _node(xv @ wv + bias.data, (x, weight, bias), bw, "conv1x1")


_IM2COL_MAX = 32


def _wrap_pad(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(x, pad, mode="wrap")


def conv3x3_circular(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with wrap-around padding, stride 1.

    ``out[y, x] = sum_{i,j} in[(y+i-1) % H, (x+j-1) % W] @ weight[i, j] + bias``,
    so the op commutes exactly with cyclic spatial shifts.
    """
    if x.ndim < 3:
        raise DimensionError(f"conv3x3_circular: input must be [..., H, W, C], got {x.shape}")
    if weight.shape[:2] != (3, 3) or weight.ndim != 4 or weight.shape[2] != x.shape[-1]:
        raise DimensionError(f"conv3x3_circular: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[3],):
        raise DimensionError(f"conv3x3_circular: bias {bias.shape} does not match weight {weight.shape}")
    h, w = x.shape[-3], x.shape[-2]
    c, d = weight.shape[2], weight.shape[3]
    p = _wrap_pad(x.data)
    wv = weight.data
    if 9 * c <= _IM2COL_MAX:
        # few input channels: one wide matmul beats nine thin ones
        cols = np.concatenate([p[..., i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1)
        out = cols @ wv.reshape(9 * c, d) + bias.data
    else:
        out = np.empty(x.shape[:-1] + (d,))
        out[...] = bias.data
        for i in range(3):
            for j in range(3):
                out += p[..., i:i + h, j:j + w, :] @ wv[i, j]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            # adjoint of a circular correlation is the flipped correlation of the wrapped gradient
            q = _wrap_pad(g)
            gx = np.zeros(x.shape)
            for i in range(3):
                for j in range(3):
                    gx += q[..., 2 - i:2 - i + h, 2 - j:2 - j + w, :] @ wv[i, j].T
        if weight.requires_grad:
            g2 = g.reshape(-1, d)
            gw = np.empty_like(wv)
            for i in range(3):
                for j in range(3):
                    gw[i, j] = p[..., i:i + h, j:j + w, :].reshape(-1, c).T @ g2
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gw, gb

    return _node(out, (x, weight, bias), bw, "conv3x3_circular")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> list:
    """Central differences of the scalar ``fn()`` w.r.t. each input's data."""
    grads = []
    for t in inputs:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = fn().item()
            flat[k] = orig - h
            fm = fn().item()
            flat[k] = orig
            g[k] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Per-scalar ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are zero up to finite-difference noise
    (about eps*|f|/h) from reading as large relative errors.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over ``inputs``."""
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = numerical_gradient(fn, inputs, h)
    return max(float(relative_error(a, n).max()) for a, n in zip(analytic, numeric))


def kink_distance(loss: Tensor) -> float:
    """Smallest |input| fed to a non-smooth op in the graph of ``loss``.

    Finite differences are only meaningful when this exceeds the probe step
    times the local sensitivity.
    """
    best = np.inf
    for node in Tape.from_loss(loss).nodes:
        if node.op in KINK_OPS:
            src = node._parents[0].data
            val = np.abs(src).min() if node.op != "l2_norm_rows" else node.data.min()
            best = min(best, float(val))
    return best
