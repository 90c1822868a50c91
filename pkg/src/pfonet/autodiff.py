"""Reverse-mode automatic differentiation over numpy arrays.

The graph is built while the forward computation runs: every operation on a
`Tensor` returns a new node that remembers its parents and a closure that
pushes adjoints back to them. `backward` orders the graph topologically and
replays those closures in reverse.

Only first derivatives are supported. Derivatives of network outputs with
respect to coordinates are built explicitly in the forward pass (see
`pfonet.network`), so parameter gradients of losses containing them are
ordinary first-order reverse sweeps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, adjoint=None):
        backward(self, adjoint)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value, _op=op)
    out = Tensor(value, requires_grad=True, _parents=parents, _op=op)
    out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _node(-a.value, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), bw, "mul")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 2.0:
        val = a.value * a.value
    else:
        val = a.value**p

    def bw(g):
        if p == 2.0:
            a._accumulate(g * 2.0 * a.value)
        else:
            a._accumulate(g * p * a.value ** (p - 1.0))

    return _node(val, (a,), bw, f"pow{p:g}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _node(a.value @ b.value, (a, b), bw, "matmul")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)

    def bw(g):
        a._accumulate(g * (1.0 - t * t))

    return _node(t, (a,), bw, "tanh")


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    mask = (a.value > 0).astype(np.float64)

    def bw(g):
        a._accumulate(g * mask)

    return _node(a.value * mask, (a,), bw, "relu")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)

    def bw(g):
        a._accumulate(g * e)

    return _node(e, (a,), bw, "exp")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.value.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _node(np.transpose(a.value, axes), (a,), bw, "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.value)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _node(a.value[idx], (a,), bw, "getitem")


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, bw, "concat")


def linear_map(a: Tensor, fn: Callable[[np.ndarray], np.ndarray],
               adjoint_fn: Callable[[np.ndarray], np.ndarray], name: str = "linear") -> Tensor:
    """Apply a fixed linear operator given by its action and its transpose."""

    def bw(g):
        a._accumulate(adjoint_fn(g))

    return _node(fn(a.value), (a,), bw, name)


def _pad(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output length and (before, after) padding along one spatial axis."""
    if padding == "valid":
        return (size - kernel) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "valid") -> Tensor:
    """Cross-correlation of NCHW input with (F, C, kh, kw) filters."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, filters {Cw}")
    Ho, pt, pb = conv_output_size(H, kh, stride, padding)
    Wo, pl, pr = conv_output_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ValueError("conv2d output would be empty")
    pads = (pt, pb, pl, pr)
    xp = _pad(x.value, pads)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    # (B, Ho, Wo, C, kh, kw) -> rows of im2col
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.value.reshape(F, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.value[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i: i + (Ho - 1) * stride + 1: stride,
                       j: j + (Wo - 1) * stride + 1: stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(gx[:, :, pt: pt + H, pl: pl + W])

    return _node(out, parents, bw, "conv2d")


# -- reverse sweep ---------------------------------------------------------

def topological_order(output: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, adjoint=None) -> None:
    """Populate ``.grad`` of every leaf tensor that ``output`` depends on.

    Leaf gradients are reset first, so after the call they hold exactly the
    derivative of this output contracted with ``adjoint``.
    """
    if not isinstance(output, Tensor) or not output.requires_grad:
        raise AutodiffError("backward called on a value that was not computed from "
                            "any tensor requiring gradients")
    if adjoint is None:
        if output.value.size != 1:
            raise AutodiffError("an output adjoint is required for non-scalar outputs")
        adjoint = np.ones_like(output.value)
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != output.shape:
        raise AutodiffError(f"adjoint shape {adjoint.shape} does not match output {output.shape}")
    order = topological_order(output)
    for node in order:
        node.grad = None
    output._accumulate(adjoint)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate adjoints are not needed after propagation
            node.grad = None if node._parents else node.grad


def value_and_grad(fn: Callable[..., Tensor], params: dict[str, np.ndarray], *args, **kwargs):
    """Evaluate ``fn(tensor_params, ...)`` and its gradient w.r.t. ``params``."""
    tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = fn(tparams, *args, **kwargs)
    backward(out)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
             for k, t in tparams.items()}
    return float(out.value), grads


# -- optimiser -------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameters and state."""
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t)
