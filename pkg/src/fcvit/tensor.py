"""Dense float tensors with a small reverse-mode autodiff engine.

Every kernel here is a pure function of numpy arrays. Each op checks its
result for NaN/Inf and raises :class:`NonFiniteError` instead of letting a
non-finite value propagate.

Summation order is fixed where it matters for exactness: :func:`matmul`
accumulates over the inner axis in index order, and :func:`conv2d`
accumulates in input-channel -> kernel-row -> kernel-column order, adding
the bias last. A 1x1 ungrouped convolution therefore reproduces a per-pixel
:func:`matmul` bit for bit.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_SUPPORTED = (np.dtype(np.float32), np.dtype(np.float64))
_grad_enabled = True
_branch_log: list | None = None


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested op."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the winner masks of every :func:`maxout` evaluated in the block.

    Used by the gradient checker to detect perturbations that cross a
    non-differentiable tie.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _to_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _SUPPORTED:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-d float32/float64 array that can record its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _to_array(data, dtype)
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a single-element tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def sqrt(self) -> Tensor:
        return sqrt(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps degenerate (zero-variance) paths finite
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0),)

    return _result(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def maxout(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of two same-shape tensors; ties route the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"maxout operands differ: {a.shape} vs {b.shape}")
    win = a.data >= b.data
    if _branch_log is not None:
        _branch_log.append(win.copy())
    out = np.where(win, a.data, b.data)
    return _result(out, (a, b), lambda g: (np.where(win, g, 0), np.where(win, 0, g)), "maxout")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def identity(x: Tensor) -> Tensor:
    return x


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of an NCHW tensor -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3))


# -- matmul ---------------------------------------------------------------

def _matmul_fixed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=np.result_type(a, b))
    for k in range(a.shape[-1]):
        out += a[..., :, k:k + 1] * b[..., k:k + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``c[..., i, j] = sum_k a[..., i, k] b[..., k, j]``, accumulated in k order."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = _matmul_fixed(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


# -- convolution ----------------------------------------------------------

def _pad_pairs(padding) -> tuple[tuple[int, int], tuple[int, int]]:
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    (pt, pb), (pl, pr) = padding
    return (int(pt), int(pb)), (int(pl), int(pr))


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d convolution.

    ``padding`` is either a symmetric int or ``((top, bottom), (left, right))``.
    Depthwise is ``groups == in_channels == out_channels``; pointwise is
    ``kernel == 1``.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | tuple = 0
    groups: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.groups) < 1:
            raise ShapeError(f"non-positive extent in {self}")
        (pt, pb), (pl, pr) = _pad_pairs(self.padding)
        if min(pt, pb, pl, pr) < 0:
            raise ShapeError("negative padding")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"groups={self.groups} must divide {self.in_channels} and {self.out_channels}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (pt, pb), (pl, pr) = _pad_pairs(self.padding)
        sizes = []
        for extent, pad in ((h, pt + pb), (w, pl + pr)):
            span = extent + pad - self.kernel
            if span < 0 or span % self.stride:
                raise ShapeError(
                    f"input {extent} with padding {pad}, kernel {self.kernel}, "
                    f"stride {self.stride} gives a non-integral output size")
            sizes.append(span // self.stride + 1)
        return sizes[0], sizes[1]

    def macs(self, h_out: int, w_out: int) -> int:
        return h_out * w_out * self.out_channels * self.kernel ** 2 * self.in_channels // self.groups


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding=0, groups: int = 1) -> Tensor:
    """Zero-padded grouped 2-d cross-correlation over NCHW input.

    ``w`` has shape ``(C_out, C_in // groups, k, k)``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, cg, k, k2 = w.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    spec = ConvSpec(c, co, k, stride, padding, groups)
    if cg != c // groups:
        raise ShapeError(f"weight {w.shape} does not match {c} input channels / {groups} groups")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias shape {b.shape} != ({co},)")
    ho, wo = spec.output_size(h, wd)
    (pt, pb), (pl, pr) = _pad_pairs(padding)
    s, og = stride, co // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    xg = xp.reshape(n, groups, cg, xp.shape[2], xp.shape[3])
    wg = w.data.reshape(groups, og, cg, k, k)
    acc = np.zeros((n, groups, og, ho, wo), dtype=np.result_type(x.data, w.data))
    term = np.empty_like(acc)
    hi, wi = s * (ho - 1) + 1, s * (wo - 1) + 1
    for ci in range(cg):
        for u in range(k):
            for v in range(k):
                patch = xg[:, :, ci, u:u + hi:s, v:v + wi:s]
                np.multiply(patch[:, :, None], wg[:, :, ci, u, v][None, :, :, None, None], out=term)
                acc += term
    out = acc.reshape(n, co, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        m = n * ho * wo
        # (groups, og, N*Ho*Wo): contractions become batched matmuls over groups
        gt = g.reshape(n, groups, og, ho, wo).transpose(1, 2, 0, 3, 4).reshape(groups, og, m)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xg)
            for u in range(k):
                for v in range(k):
                    contrib = np.matmul(wg[:, :, :, u, v].transpose(0, 2, 1), gt)
                    gxp[:, :, :, u:u + hi:s, v:v + wi:s] += (
                        contrib.reshape(groups, cg, n, ho, wo).transpose(2, 0, 1, 3, 4))
            gx = gxp.reshape(xp.shape)[:, :, pt:pt + h, pl:pl + wd]
        if w.requires_grad:
            gw = np.empty_like(wg)
            for u in range(k):
                for v in range(k):
                    patch = xg[:, :, :, u:u + hi:s, v:v + wi:s].transpose(1, 2, 0, 3, 4).reshape(groups, cg, m)
                    gw[:, :, :, u, v] = np.matmul(gt, patch.transpose(0, 2, 1))
            gw = gw.reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


# -- normalisation / probability ------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over one axis with population variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    axis = axis % x.ndim
    d = x.shape[axis]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match extent {d}")
    bshape = [1] * x.ndim
    bshape[axis] = d
    gb, bb = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gb + bb
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * gb
        gx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K)`` logits against integer labels.

    The batch mean uses an exactly rounded sum, so the value does not depend
    on the order of the samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n = len(labels)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-math.fsum(logp[rows, labels].tolist()) / n, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return _result(out, (logits,), backward, "cross_entropy")
