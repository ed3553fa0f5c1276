"""Tensor type, differentiable operations, and the reverse pass.

Every op records its inputs and a vector-Jacobian closure on the output
tensor; backward() walks the recorded graph in reverse topological order.
Gradients accumulate (+=) into tensors created with requires_grad.
"""

from __future__ import annotations

import numpy as np

LAYERNORM_EPS = 1e-5


class Tensor:
    """A float64 array with an optional gradient accumulator.

    grad is allocated only for requires_grad leaves; intermediate
    cotangents live on the tape during backward and are discarded.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_track")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._track = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; non-tensor operands become constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p._track for p in parents):
        out._track = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the source shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
    # reverse topological order by iterative post-order walk
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p._track:
                stack.append((p, False))

    cotangent: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = cotangent.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent._track:
                continue
            acc = cotangent.get(id(parent))
            cotangent[id(parent)] = pg if acc is None else acc + pg


def detach(t: Tensor) -> Tensor:
    """A constant copy that blocks gradient flow."""
    return Tensor(t.data.copy())


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in numpy."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a) -> Tensor:
    a = _wrap(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a) -> Tensor:
    a = _wrap(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _wrap(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    pick_a = a.data <= b.data  # ties route to the first argument
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * pick_a, a.data.shape),
            _unbroadcast(g * ~pick_a, b.data.shape),
        ),
    )


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    pick_a = a.data >= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * pick_a, a.data.shape),
            _unbroadcast(g * ~pick_a, b.data.shape),
        ),
    )


# ---------------------------------------------------------------------------
# normalizations and reductions


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def layernorm(a, gain, bias, axis: int = -1, eps: float = LAYERNORM_EPS) -> Tensor:
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (
            dx,
            _unbroadcast(g * xhat, gain.data.shape),
            _unbroadcast(g, bias.data.shape),
        )

    return _make(out, (a, gain, bias), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, a.data.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inverse = np.argsort(axes)
    return _make(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def getitem(a, index) -> Tensor:
    """Basic indexing (ints, slices, tuples); gradient scatters back."""
    a = _wrap(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(a.data[index], (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along an axis with integer indices; duplicates accumulate."""
    a = _wrap(a)
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# sampling


def bilinear_sample(fmap, x, y) -> Tensor:
    """Sample a (H, W, C) map at continuous pixel coordinates.

    x and y share a shape S; the result has shape S + (C,). Integer
    coordinates hit grid values exactly; locations outside the map read as
    zero. Gradients flow to the map and to both coordinate tensors.
    """
    fmap, x, y = _wrap(fmap), _wrap(x), _wrap(y)
    if fmap.data.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got {fmap.data.shape}")
    if x.data.shape != y.data.shape:
        raise ValueError(f"coordinate shapes differ: {x.data.shape} vs {y.data.shape}")
    h, w, _ = fmap.data.shape

    x0f = np.floor(x.data)
    y0f = np.floor(y.data)
    fx = x.data - x0f
    fy = y.data - y0f
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)

    def corner(ix, iy):
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        ixc = np.clip(ix, 0, w - 1)
        iyc = np.clip(iy, 0, h - 1)
        vals = fmap.data[iyc, ixc, :] * valid[..., None]
        return vals, valid, ixc, iyc

    v00, m00, cx00, cy00 = corner(x0, y0)
    v10, m10, cx10, cy10 = corner(x0 + 1, y0)
    v01, m01, cx01, cy01 = corner(x0, y0 + 1)
    v11, m11, cx11, cy11 = corner(x0 + 1, y0 + 1)

    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    out = (
        v00 * w00[..., None]
        + v10 * w10[..., None]
        + v01 * w01[..., None]
        + v11 * w11[..., None]
    )

    def vjp(g):
        gmap = np.zeros_like(fmap.data)
        for vals_mask, ixc, iyc, wgt in (
            (m00, cx00, cy00, w00),
            (m10, cx10, cy10, w10),
            (m01, cx01, cy01, w01),
            (m11, cx11, cy11, w11),
        ):
            contrib = g * (wgt * vals_mask)[..., None]
            np.add.at(gmap, (iyc.ravel(), ixc.ravel()), contrib.reshape(-1, gmap.shape[2]))
        dx = (v10 - v00) * (1.0 - fy)[..., None] + (v11 - v01) * fy[..., None]
        dy = (v01 - v00) * (1.0 - fx)[..., None] + (v11 - v10) * fx[..., None]
        gx = (g * dx).sum(axis=-1)
        gy = (g * dy).sum(axis=-1)
        return gmap, gx, gy

    return _make(out, (fmap, x, y), vjp)
