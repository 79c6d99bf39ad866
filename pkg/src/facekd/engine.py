"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (models, attention, losses) is built from the ops in
this module. Data is float64 by default so finite-difference gradient checks
are meaningful; float32 can be selected per-tensor where speed matters more
than check precision.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on NaN/Inf inputs where the contract demands finite values."""


class ContractError(ValueError):
    """Raised when a call violates an operation's precondition."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-d array node in a reverse-mode computation graph.

    Leaf tensors (parameters, inputs) have no parents; op results carry a
    closure that routes the output gradient back to their parents. Gradients
    accumulate on leaves across backward passes; intermediate gradients are
    reset at the start of each pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the graph it heads."""
        if self.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        # Intermediates are reset so repeated backward() calls accumulate
        # exactly 1x per pass on the leaves.
        for node in topo:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        if self.grad is None or self._parents:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return _slice(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    req = tuple(p for p in parents if p.requires_grad)
    if req:
        out.requires_grad = True
        out._parents = req
        out._backward = backward
    return out


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _result(data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return _result(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _result(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return _result(data, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def backward(g):
        x._accumulate(g * mask)

    return _result(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(data, (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data ** 2) * _INV_SQRT2PI
        x._accumulate(g * (cdf + x.data * pdf))

    return _result(data, (x,), backward)


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _result(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    return tsum(x, axis=axis, keepdims=keepdims) * Tensor(1.0 / n)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(data, (x,), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _result(data, (x,), backward)


def swap_last2(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def roll(x: Tensor, shift, axis) -> Tensor:
    data = np.roll(x.data, shift, axis=axis)

    def backward(g):
        neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
        x._accumulate(np.roll(g, neg, axis=axis))

    return _result(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _result(data, tensors, backward)


def _slice(x: Tensor, key) -> Tensor:
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        x._accumulate(gx)

    return _result(data, (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 \
                else np.multiply.outer(g, b.data).reshape(a.shape)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if a.ndim > 1 \
                else np.multiply.outer(a.data, g).reshape(b.shape)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _result(data, (a, b), backward)


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """Differentiable lookup of rows of `table` by an integer index array.

    The gradient scatter-adds into the table; the index itself is discrete
    and carries no gradient.
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ContractError("gather index must be an integer array")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractError(
            f"gather index out of range [0, {table.shape[0]}): "
            f"[{index.min()}, {index.max()}]"
        )
    data = table.data[index]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        table._accumulate(gt)

    return _result(data, (table,), backward)


# -- composite ops ----------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate(data * (g - dot))

    return _result(data, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def backward(g):
        x._accumulate(g - sm * g.sum(axis=-1, keepdims=True))

    return _result(data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(Tensor(1.0), sqrt(var + Tensor(eps)))
    return mul(mul(centered, inv), gamma) + beta


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes disagree: {a.shape} vs {b.shape}")
    d = a - b
    return tmean(mul(d, d))


def l2_normalize_rows(x: Tensor, eps: float = 1e-60) -> Tensor:
    # clipping (rather than adding) eps keeps nonzero rows exactly unit-norm
    sq = tsum(mul(x, x), axis=-1, keepdims=True)
    return mul(x, div(Tensor(1.0), sqrt(clip(sq, eps, np.inf))))


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity between corresponding rows of a and b."""
    an = l2_normalize_rows(a)
    bn = l2_normalize_rows(b)
    return tsum(mul(an, bn), axis=-1)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a B x C x H x W input with an F x C x kh x kw kernel."""
    b, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d output size non-positive for input {x.shape}, "
            f"kernel {kernel.shape}, stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c * kh * kw, oh * ow))
    idx = 0
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, idx * c:(idx + 1) * c, :] = patch.reshape(b, c, -1)
            idx += 1
    kmat = np.concatenate(
        [kernel.data[:, :, i, j] for i in range(kh) for j in range(kw)], axis=1
    )  # F x (kh*kw*C), column blocks in the same order as cols
    data = np.matmul(kmat, cols).reshape(b, f, oh, ow)

    def backward(g):
        gmat = g.reshape(b, f, oh * ow)
        if kernel.requires_grad:
            gk_flat = np.einsum("bfn,bkn->fk", gmat, cols)
            gk = np.zeros_like(kernel.data)
            idx2 = 0
            for i in range(kh):
                for j in range(kw):
                    gk[:, :, i, j] = gk_flat[:, idx2 * c:(idx2 + 1) * c]
                    idx2 += 1
            kernel._accumulate(gk)
        if x.requires_grad:
            gcols = np.einsum("fk,bfn->bkn", kmat, gmat)
            gxp = np.zeros_like(xp)
            idx2 = 0
            for i in range(kh):
                for j in range(kw):
                    patch = gcols[:, idx2 * c:(idx2 + 1) * c, :].reshape(b, c, oh, ow)
                    gxp[:, :, i:i + stride * oh:stride,
                        j:j + stride * ow:stride] += patch
                    idx2 += 1
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return _result(data, (x, kernel), backward)


# -- parameters -------------------------------------------------------------

class ParamRegistry:
    """Named parameter store with a trainable/frozen partition."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = bool(trainable)
        if not trainable:
            t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, trainable: bool) -> None:
        self._trainable[name] = bool(trainable)
        p = self._params[name]
        p.requires_grad = bool(trainable)
        if not trainable:
            p.grad = np.zeros_like(p.data)

    def trainable_items(self):
        return [(n, p) for n, p in self._params.items() if self._trainable[n]]

    def trainable_param_count(self) -> int:
        return sum(p.size for _, p in self.trainable_items())

    def gradient(self, name: str) -> np.ndarray:
        p = self._params[name]
        if p.grad is None:
            return np.zeros_like(p.data)
        return p.grad

    def zero_grads(self) -> None:
        for name, p in self._params.items():
            if self._trainable[name]:
                p.grad = None
            else:
                p.grad = np.zeros_like(p.data)

    def merge(self, other: "ParamRegistry", prefix: str = "") -> None:
        for name, p in other.items():
            self.register(prefix + name, p, other.is_trainable(name))
