"""Small reverse-mode autodiff over float64 numpy arrays.

Every op's backward rule is written with the same differentiable ops, so
``grad(..., create_graph=True)`` records the backward pass as a graph of its
own and gradients of gradients come for free.  The op set is what the critic
needs: elementwise arithmetic with broadcasting, reductions, reshape, dense
matmul, 2D convolution (and its two adjoints), leaky ReLU and concat.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    global _RECORDING
    prev, _RECORDING = _RECORDING, False
    try:
        yield
    finally:
        _RECORDING = prev


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    global _RECORDING
    prev, _RECORDING = _RECORDING, flag
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------- broadcasting

def _reduced_axes(shape, target):
    lead = len(shape) - len(target)
    axes = list(range(lead))
    axes += [lead + i for i, n in enumerate(target) if n == 1 and shape[lead + i] != 1]
    return tuple(axes), lead


def sum_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if t.shape == shape:
        return t
    axes, lead = _reduced_axes(t.shape, shape)
    data = t.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    return _make(data.reshape(shape), (t,), lambda g: (broadcast_to(g, t.shape),), "sum_to")


def broadcast_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if t.shape == shape:
        return t
    data = np.broadcast_to(t.data, shape).copy()
    return _make(data, (t,), lambda g: (sum_to(g, t.shape),), "broadcast_to")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), neg(sum_to(g, b.shape))), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p == 1.0:
        return a
    if p == 2.0:
        return mul(a, a)
    return _make(a.data ** p, (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),), "pow")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    # the slope mask is piecewise constant, so it carries no gradient itself
    gate = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * gate, (a,), lambda g: (mul(g, Tensor(gate)),), "leaky_relu")


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


# ---------------------------------------------------------------- shape / reductions

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise InvalidInputError(f"transpose expects a 2D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if np.isscalar(axis) else axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def l2_norm(a, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all axes by default). Gradient at 0 is 0."""
    a = as_tensor(a)
    sq = a.data ** 2
    data = np.sqrt(sq.sum(axis=axis))

    def backward(g):
        safe = add(out, Tensor((data == 0).astype(np.float64)))
        ratio = div(g, safe)
        if axis is not None:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        else:
            kept = (1,) * a.ndim
        return (mul(a, reshape(ratio, kept)),)

    out = _make(np.asarray(data), (a,), backward, "l2_norm")
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(take(g, int(lo), int(hi), axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    return _make(a.data[index].copy(), (a,),
                 lambda g: (embed(g, a.shape, start, axis),), "take")


def embed(a, shape, start: int, axis: int = 0) -> Tensor:
    """Zero tensor of ``shape`` with ``a`` written at ``start`` along ``axis``."""
    a = as_tensor(a)
    data = np.zeros(shape)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, start + a.shape[axis])
    data[tuple(index)] = a.data
    return _make(data, (a,), lambda g: (take(g, start, start + a.shape[axis], axis),), "embed")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def dense(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight of shape (in, out)."""
    x = as_tensor(x)
    if x.ndim != 2 or as_tensor(weight).shape[0] != x.shape[1]:
        raise InvalidInputError(
            f"dense: input {x.shape} does not match weight {as_tensor(weight).shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B * Ho * Wo, C * k * k)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int, out_hw) -> np.ndarray:
    B, C, H, W = x_shape
    Ho, Wo = out_hw
    cols = cols.reshape(B, Ho, Wo, C, k, k)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + H, pad:pad + W]


def _check_conv(x_shape, w_shape, op):
    if len(x_shape) != 4 or len(w_shape) != 4 or x_shape[1] != w_shape[1] or w_shape[2] != w_shape[3]:
        raise InvalidInputError(f"{op}: input {tuple(x_shape)} incompatible with kernel {tuple(w_shape)}")


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, k, k) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x.shape, w.shape, "conv2d")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise InvalidInputError(f"conv2d: input {x.shape} too small for kernel {k}, stride {stride}, pad {pad}")
    cols = _im2col(x.data, k, stride, pad)
    y = (cols @ w.data.reshape(O, -1).T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        return (conv2d_input_grad(g, w, stride, pad, x.shape),
                conv2d_weight_grad(x, g, stride, pad, w.shape))

    return _make(np.ascontiguousarray(y), (x, w), backward, "conv2d")


def conv2d_input_grad(g, w, stride: int, pad: int, x_shape) -> Tensor:
    """Adjoint of conv2d in its input: maps (B, O, Ho, Wo) to ``x_shape``."""
    g, w = as_tensor(g), as_tensor(w)
    O, C, k, _ = w.shape
    B, _, Ho, Wo = g.shape
    dcols = g.data.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O) @ w.data.reshape(O, -1)
    data = _col2im(dcols, x_shape, k, stride, pad, (Ho, Wo))

    def backward(h):
        return (conv2d(h, w, stride, pad), conv2d_weight_grad(h, g, stride, pad, w.shape))

    return _make(data, (g, w), backward, "conv2d_input_grad")


def conv2d_weight_grad(x, g, stride: int, pad: int, w_shape) -> Tensor:
    """Adjoint of conv2d in its kernel: sums over the batch."""
    x, g = as_tensor(x), as_tensor(g)
    O, C, k, _ = w_shape
    B, _, Ho, Wo = g.shape
    cols = _im2col(x.data, k, stride, pad)
    data = (g.data.transpose(1, 0, 2, 3).reshape(O, -1) @ cols).reshape(w_shape)

    def backward(hw):
        return (conv2d_input_grad(g, hw, stride, pad, x.shape), conv2d(x, hw, stride, pad))

    return _make(data, (x, g), backward, "conv2d_weight_grad")


# ---------------------------------------------------------------- backward pass

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         allow_unused: bool = True) -> list[Tensor]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``.

    With ``create_graph`` the returned tensors are themselves differentiable.
    Inputs the output does not depend on get a zero tensor.
    """
    if output.data.size != 1:
        raise InvalidInputError(f"grad needs a scalar output, got shape {output.shape}")
    inputs = list(inputs)
    if not output.requires_grad:
        if not allow_unused:
            raise InvalidInputError("output does not depend on any input")
        return [Tensor(np.zeros(t.shape)) for t in inputs]
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
    with enable_grad(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(t), Tensor(np.zeros(t.shape))) for t in inputs]
