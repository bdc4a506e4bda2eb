"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a closure mapping the output gradient to the
gradients of its inputs. ``Tensor.backward`` walks the recorded graph in
reverse topological order and *adds* into ``.grad``; callers clear
accumulated gradients with :func:`zero_grads`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient graph."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties ------------------------------------------------
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
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- graph traversal -------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(p) into ``p.grad`` for every reachable ``p``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not part of a graph")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaves may be shared across graphs, so never alias their buffer
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        a = self.data
        p = float(exponent)

        def backward(g):
            return (g * p * a ** (p - 1),)

        return Tensor._from_op(a**p, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(original),)
        )

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    # -- elementwise nonlinearities ---------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(self.data * mask, (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        out = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradients flow to both operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return g @ y.T, x.T @ g

    return Tensor._from_op(x @ y, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


# -- convolution ---------------------------------------------------------

def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: tuple) -> np.ndarray:
    # (n, c, h', w', kh, kw) view over a padded input
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, :: stride[0], :: stride[1]]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: tuple) -> np.ndarray:
    """Patch matrix of shape (c * kh * kw, n * h' * w'), spatial axes innermost."""
    win = _windows(xp, kh, kw, stride)
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, n: int, c: int, kh: int, kw: int, oh: int, ow: int,
            out_hw: tuple, stride: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: add patches back into an (n, c, H, W) image."""
    blocks = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((c, n) + tuple(out_hw), dtype=DTYPE)
    sh, sw = stride
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += blocks[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (n, c, h, w) with ``weight`` (f, c, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    ph, pw = padding
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    oh = (h + 2 * ph - kh) // stride[0] + 1
    ow = (w + 2 * pw - kw) // stride[1] + 1
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = (wmat @ cols).reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        gw = (g_t @ cols.T).reshape(weight.shape)
        gxp = _col2im(wmat.T @ g_t, n, c, kh, kw, oh, ow, xp.shape[2:], stride)
        gx = np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + w])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0
) -> Tensor:
    """Transposed convolution; ``weight`` is (c_in, c_out, kh, kw).

    Output extent is (h - 1) * stride - 2 * padding + kh, i.e. the adjoint
    of :func:`conv2d` with the same kernel geometry.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: input {x.shape} incompatible with kernel {weight.shape}"
        )
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    full_h, full_w = (h - 1) * sh + kh, (w - 1) * sw + kw
    oh, ow = full_h - 2 * ph, full_w - 2 * pw
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv_transpose2d: padding {padding} leaves no output")
    x_t = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, n * h * w)
    wmat = weight.data.reshape(cin, cout * kh * kw)
    full = _col2im(wmat.T @ x_t, n, cout, kh, kw, h, w, (full_h, full_w), stride)
    out = full[:, :, ph : ph + oh, pw : pw + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        gcols = _im2col(gfull, kh, kw, stride)  # (cout * kh * kw, n * h * w)
        gx = (wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        gw = (x_t @ gcols.T).reshape(weight.shape)
        if bias is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // kernel, w // kernel
    if oh == 0 or ow == 0:
        raise DimensionError(f"avg_pool2d: {h}x{w} input smaller than {kernel}x{kernel} window")
    cropped = x.data[:, :, : oh * kernel, : ow * kernel]
    out = cropped.reshape(n, c, oh, kernel, ow, kernel).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        spread = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        gx[:, :, : oh * kernel, : ow * kernel] = spread
        return (gx,)

    return Tensor._from_op(out, (x,), backward)
