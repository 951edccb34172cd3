"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

Every op returns a :class:`Tensor`. When at least one input requires a
gradient (and recording is enabled) the result remembers its parents and a
closure mapping the output gradient to input gradients. :func:`backward`
walks that graph in reverse topological order.

Volumes are handled as (C, D, H, W) arrays; a batch size of one is implicit.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_state = threading.local()


def current_dtype():
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Run ops in another float type; used by gradient checks in float64."""
    prev = current_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=current_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that already hold a gradient array are added to, so callers zero
    gradients between optimisation steps.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    order, seen = [], set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.asarray(grad, dtype=current_dtype())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp(a, lo, hi) -> Tensor:
    """Clip values; the gradient is zero where clipping was active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, current_dtype()(0)), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(current_dtype())
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_channel(a) -> Tensor:
    """Softmax across axis 0 (channels) independently at every voxel."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return _result(out, (a,), bw)


# ----------------------------------------------------------------- reductions

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis, dtype=current_dtype())

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(current_dtype()),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(current_dtype()),)

    return _result(out, (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _result(a.data.mean(dtype=current_dtype()), (a,),
                   lambda g: (np.full(a.shape, g / n, dtype=current_dtype()),))


# ------------------------------------------------------------------ structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=current_dtype())
        full[idx] += g
        return (full,)

    return _result(a.data[idx], (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# --------------------------------------------------------------------- layers

def linear(x, weight, bias=None) -> Tensor:
    """y = W x + b for a flat input vector; weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = weight.data @ x.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = weight.data.T @ g if x.requires_grad else None
        gw = np.outer(g, x.data) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g if bias.requires_grad else None)

    return _result(out, parents, bw)


def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    """(C, D+2p, H+2p, W+2p) -> (C*k^3, Do*Ho*Wo)."""
    c = xp.shape[0]
    do, ho, wo = out_dims
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, : (do - 1) * stride + 1 : stride, : (ho - 1) * stride + 1 : stride,
              : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c * k ** 3, do * ho * wo)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, out_dims, padded_dims) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a padded volume."""
    do, ho, wo = out_dims
    cols = cols.reshape(c, k, k, k, do, ho, wo)
    xp = np.zeros((c,) + tuple(padded_dims), dtype=current_dtype())
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[:, a : a + (do - 1) * stride + 1 : stride,
                   b : b + (ho - 1) * stride + 1 : stride,
                   e : e + (wo - 1) * stride + 1 : stride] += cols[:, a, b, e]
    return xp


def _check_kernel(weight, what):
    if weight.ndim != 5 or not (weight.shape[2] == weight.shape[3] == weight.shape[4]):
        raise ValueError(f"{what}: kernel must be cubic (Co, Ci, k, k, k), got weight shape {weight.shape}")


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of a (C, D, H, W) input with (O, C, k, k, k) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_kernel(weight, "conv3d")
    o, c, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv3d: kernel side must be odd, got {k}")
    if x.ndim != 4 or x.shape[0] != c:
        raise ValueError(f"conv3d: input has {x.shape[0] if x.ndim == 4 else x.shape} channels, weight expects {c}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv3d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    out_dims = tuple(_out_size(n, k, stride, padding) for n in x.shape[1:])
    if min(out_dims) < 1:
        raise ValueError(f"conv3d: input dims {x.shape[1:]} too small for kernel {k} with padding {padding}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, stride, out_dims)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape((o,) + out_dims)
    if not (grad_enabled() and any(t.requires_grad for t in parents)):
        cols = None

    def bw(g):
        g2 = g.reshape(o, -1)
        gx = gw = None
        if x.requires_grad:
            gxp = _col2im(w2.T @ g2, c, k, stride, out_dims, xp.shape[1:])
            gx = gxp[:, p : p + x.shape[1], p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=1) if bias.requires_grad else None)

    return _result(out, parents, bw)


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, k, k, k).

    Output side is ``(n - 1) * stride - 2 * padding + k + output_padding``.
    Without bias this is exactly the adjoint of :func:`conv3d` taken with the
    same weight array, mapping a conv output back to the conv input space;
    ``output_padding`` recovers input sides the strided conv rounds away.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_kernel(weight, "conv_transpose3d")
    ci, co, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.ndim != 4 or x.shape[0] != ci:
        raise ValueError(f"conv_transpose3d: input has {x.shape[0] if x.ndim == 4 else x.shape} channels, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv_transpose3d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if not 0 <= output_padding < stride:
        raise ValueError(f"conv_transpose3d: output_padding must lie in [0, stride), got {output_padding}")
    in_dims = x.shape[1:]
    full_dims = tuple((n - 1) * stride + k + output_padding for n in in_dims)
    p = padding
    out_dims = tuple(n - 2 * p for n in full_dims)
    if min(out_dims) < 1:
        raise ValueError(f"conv_transpose3d: padding {p} too large for output dims {full_dims}")

    w2 = weight.data.reshape(ci, -1)
    x2 = x.data.reshape(ci, -1)
    full = _col2im(w2.T @ x2, co, k, stride, in_dims, full_dims)
    out = full[:, p : p + out_dims[0], p : p + out_dims[1], p : p + out_dims[2]] if p else full
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (p, p), (p, p), (p, p))) if p else g
        cols = _im2col(gp, k, stride, in_dims)
        gx = (w2 @ cols).reshape(x.shape) if x.requires_grad else None
        gw = (x2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.reshape(co, -1).sum(axis=1) if bias.requires_grad else None)

    return _result(out, parents, bw)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS, update_stats: bool = True) -> Tensor:
    """Per-channel normalisation of a (C, D, H, W) tensor.

    In training mode the statistics come from the input itself (with batch
    size one this is instance statistics) and, unless ``update_stats`` is
    False, the running estimates (plain arrays or non-trainable Tensors) are
    updated in place with ``momentum``. Eval mode uses the running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: scale/shift must have shape ({c},), got {gamma.shape}, {beta.shape}")
    bshape = (c, 1, 1, 1)
    flat = x.data.reshape(c, -1)
    n = flat.shape[1]
    if training:
        mu = flat.mean(axis=1, dtype=current_dtype())
        var = flat.var(axis=1, dtype=current_dtype())
    if training and update_stats:
        unbiased = var * (n / max(n - 1, 1))
        new_rm = ((1 - momentum) * rm + momentum * mu).astype(current_dtype())
        new_rv = ((1 - momentum) * rv + momentum * unbiased).astype(current_dtype())
        if isinstance(running_mean, Tensor):
            running_mean.data = new_rm
            running_var.data = new_rv
        else:
            running_mean[...] = new_rm
            running_var[...] = new_rv
    if not training:
        mu, var = rm, rv
    inv = (1.0 / np.sqrt(var + eps)).astype(current_dtype())
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(c, -1).sum(axis=1)
        if beta.requires_grad:
            gb = g.reshape(c, -1).sum(axis=1)
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m1 = gxhat.reshape(c, -1).mean(axis=1).reshape(bshape)
                m2 = (gxhat * xhat).reshape(c, -1).mean(axis=1).reshape(bshape)
                gx = inv.reshape(bshape) * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _result(out.astype(current_dtype()), (x, gamma, beta), bw)
