"""Minimal reverse-mode autodiff over dense float64 tensors.

Operations are recorded on an explicit :class:`Tape`; calling
:func:`backward` on a scalar loss walks the tape in reverse and
accumulates gradients into every ``requires_grad`` leaf. Gradients are
summed across uses and cleared only by :meth:`SGD.step` or
:func:`zero_grads`.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "SGD",
    "ShapeError",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_div",
    "matmul",
    "conv2d",
    "relu",
    "exp",
    "log",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "max_last_axis",
    "softmax",
    "logsumexp",
    "batchnorm",
    "layernorm",
]

_EPS_NORM = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; usable as a context manager."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def record(self, inputs, output, backward_fn) -> None:
        self._nodes.append(_Node(inputs, output, backward_fn))

    def __len__(self):
        return len(self._nodes)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
    _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op_name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the active tape.

    The tape is consumed: a second call without re-recording is a no-op.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    nodes, tape._nodes = tape._nodes, []
    if not nodes:
        return
    loss.grad = np.array(1.0)
    for node in reversed(nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        in_grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, in_grads):
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)
        # intermediate grads are tape-local; free them
        if node.output is not loss:
            node.output.grad = None


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", (a, b), out, bwd)


def scalar_div(a, s: float) -> Tensor:
    """Divide a tensor by a python scalar (no gradient w.r.t. the scalar)."""
    a = _as_tensor(a)
    s = float(s)
    out = a.data / s

    def bwd(g):
        return (g / s,)

    return _record("scalar_div", (a,), out, bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _record("relu", (a,), out, bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (a,), out, bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record("log", (a,), out, bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, bwd)


def tensor_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", (a,), out, bwd)


def tensor_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record("mean", (a,), out, bwd)


def max_last_axis(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim < 1:
        raise ShapeError("max_last_axis: input must have at least one axis")
    idx = a.data.argmax(axis=-1)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _record("max_last_axis", (a,), out, bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    q = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * q).sum(axis=-1, keepdims=True)
        return (q * (g - dot),)

    return _record("softmax", (a,), q, bwd)


def logsumexp(a) -> Tensor:
    """Log-sum-exp over the last axis, stabilised by per-row max subtraction."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    q = e / s

    def bwd(g):
        return (g[..., None] * q,)

    return _record("logsumexp", (a,), out, bwd)


def conv2d(x, w) -> Tensor:
    """3x3 convolution, stride 1, zero padding preserving spatial size.

    x: (B, Cin, H, W); w: (Cout, Cin, 3, 3).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: only 3x3 kernels supported, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    b, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, wd)            # (B, H, W, Cin*9)
    wmat = w.data.reshape(cout, -1)       # (Cout, Cin*9)
    out = cols @ wmat.T                   # (B, H, W, Cout)
    out = out.transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1)                        # (B, H, W, Cout)
        gw = np.tensordot(gmat, cols, axes=([0, 1, 2], [0, 1, 2]))  # (Cout, Cin*9)
        gcols = gmat @ wmat                                   # (B, H, W, Cin*9)
        gxp = _col2im3(gcols, b, cin, h, wd)
        return gxp[:, :, 1:-1, 1:-1], gw.reshape(w.shape)

    return _record("conv2d", (x, w), out, bwd)


def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, h, w, c, 3, 3), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
    return cols.reshape(b, h, w, c * 9)


def _col2im3(gcols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    g6 = gcols.reshape(b, h, w, c, 3, 3)
    gxp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + h, j:j + w] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp


def _norm_axes(x: Tensor, op: str):
    if x.data.ndim == 2:
        return (0,)
    if x.data.ndim == 4:
        return (0, 2, 3)
    raise ShapeError(f"{op}: expected 2-D or 4-D input, got {x.shape}")


def _affine_shape(x: Tensor, nfeat: int):
    if x.data.ndim == 2:
        return (1, nfeat)
    return (1, nfeat, 1, 1)


def batchnorm(x, scale, shift) -> Tensor:
    """Batch normalization over current-batch statistics with trainable affine.

    Features are axis 1; statistics are taken over all other axes. No
    running statistics are kept.
    """
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    axes = _norm_axes(x, "batchnorm")
    if x.shape[0] < 2:
        raise ShapeError(f"batchnorm: batch size must be >= 2, got {x.shape[0]}")
    nfeat = x.shape[1]
    if scale.data.size != nfeat or shift.data.size != nfeat:
        raise ShapeError(
            f"batchnorm: affine shapes {scale.shape}/{shift.shape} do not match {nfeat} features")
    ash = _affine_shape(x, nfeat)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_NORM)
    xhat = (x.data - mu) * inv
    out = xhat * scale.data.reshape(ash) + shift.data.reshape(ash)
    n = x.data.size // nfeat

    def bwd(g):
        gs = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(ash)
        gx = (inv / n) * (n * gxhat
                          - gxhat.sum(axis=axes, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gs.reshape(scale.shape), gb.reshape(shift.shape)

    return _record("batchnorm", (x, scale, shift), out, bwd)


def layernorm(x, scale, shift) -> Tensor:
    """Per-sample normalization over the last axis with trainable affine."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    if x.data.ndim < 1:
        raise ShapeError("layernorm: input must have at least one axis")
    nfeat = x.shape[-1]
    if scale.data.size != nfeat or shift.data.size != nfeat:
        raise ShapeError(
            f"layernorm: affine shapes {scale.shape}/{shift.shape} do not match {nfeat} features")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_NORM)
    xhat = (x.data - mu) * inv
    sc = scale.data.reshape((1,) * (x.data.ndim - 1) + (nfeat,))
    out = xhat * sc + shift.data.reshape(sc.shape)

    def bwd(g):
        red = tuple(range(x.data.ndim - 1))
        gs = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxhat = g * sc
        gx = (inv / nfeat) * (nfeat * gxhat
                              - gxhat.sum(axis=-1, keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gs.reshape(scale.shape), gb.reshape(shift.shape)

    return _record("layernorm", (x, scale, shift), out, bwd)


class SGD:
    """SGD with momentum; velocity buffers persist across steps."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError("sgd step requires a populated grad on every parameter")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        zero_grads(self.params)
