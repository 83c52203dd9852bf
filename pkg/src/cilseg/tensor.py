"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything runs on float64 numpy arrays stored row-major. Each operation
records its inputs and a backward rule on the output tensor; backward()
walks the recorded graph in reverse topological order and accumulates
gradients additively, so a tensor consumed by several downstream ops
receives the sum of all path gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (teacher inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(sa, sb):
    if len(sa) != len(sb):
        raise ValueError(f"rank mismatch: {sa} vs {sb}")
    for a, b in zip(sa, sb):
        if a != b and a != 1 and b != 1:
            raise ValueError(f"shapes not broadcastable on singleton axes: {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log with the engine-wide epsilon clamp (log(max(x, 1e-12)))."""
    clamped = np.maximum(a.data, LOG_EPS)
    out_data = np.log(clamped)

    def backward(g):
        if a.requires_grad:
            # zero slope below the clamp, matching the forward plateau
            a._accumulate(g * np.where(a.data > LOG_EPS, 1.0 / clamped, 0.0))

    return _make(out_data, (a,), backward)


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = tuple(range(a.data.ndim)) if axes is None else (
        (axes,) if isinstance(axes, int) else tuple(axes))
    out_data = a.data.sum(axis=ax, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, ax)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = tuple(range(a.data.ndim)) if axes is None else (
        (axes,) if isinstance(axes, int) else tuple(axes))
    n = int(np.prod([a.shape[i] for i in ax]))
    return scale(tsum(a, ax, keepdims), 1.0 / n)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into the slice."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    return _make(y, (a,), backward)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an [N,C,H,W] tensor."""
    if logits.data.ndim != 4:
        raise ValueError("softmax_channels expects an [N,C,H,W] tensor")
    return softmax(logits, axis=1)


# -- spatial ops -----------------------------------------------------------

def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over [N,Cin,H,W] with kernel [Cout,Cin,kh,kw]."""
    n, cin, h, w = inp.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, image has {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError("kernel does not fit inside the padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        x = np.zeros((n, cin, hp, wp))
        x[:, :, padding:padding + h, padding:padding + w] = inp.data
    else:
        x = inp.data
    # im2col via strided windows: [N, Cin, ho, wo, kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)) \
        .reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ kmat.T + bias.data
    out_data = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)) \
            .reshape(n * ho * wo, cout)
        if kernel.requires_grad:
            kernel._accumulate((gmat.T @ cols).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if inp.requires_grad:
            gcols = (gmat @ kmat).reshape(n, ho, wo, cin, kh, kw)
            gcols = np.ascontiguousarray(gcols.transpose(0, 3, 4, 5, 1, 2))
            gx = np.zeros((n, cin, hp, wp))
            for ki in range(kh):
                for kj in range(kw):
                    gx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        gcols[:, :, ki, kj]
            if padding:
                gx = gx[:, :, padding:hp - padding, padding:wp - padding]
            inp._accumulate(gx)

    return _make(out_data, (inp, kernel, bias), backward)


def upsample_nearest(inp: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if inp.data.ndim != 4:
        raise ValueError("upsample_nearest expects an [N,C,H,W] tensor")
    if factor == 1:
        out_data = inp.data.copy()
    else:
        out_data = inp.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        if inp.requires_grad:
            if factor == 1:
                inp._accumulate(g)
            else:
                n, c, hf, wf = g.shape
                blocks = g.reshape(n, c, hf // factor, factor, wf // factor, factor)
                inp._accumulate(blocks.sum(axis=(3, 5)))

    return _make(out_data, (inp,), backward)
