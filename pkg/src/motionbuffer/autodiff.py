"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray and records the op that produced it; calling
``backward()`` on a scalar result walks the graph in reverse topological
order and accumulates gradients into every tensor created with
``requires_grad=True``. Dtype follows the wrapped arrays, so running a graph
in float64 (for finite-difference checks) only requires float64 inputs and
parameters.

Inference code should run under ``no_grad()`` so no graph is recorded.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

# Process-wide switch (graphs are built single-threaded; see the concurrency
# notes in the module docstring).
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()  # copy: g may alias an upstream buffer
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward() on a tensor with no recorded graph")
        # Iterative topo sort; graphs can be deep enough to bother recursion.
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _coerce(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad or p._parents:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                break
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast to reach g's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def pow_const(a, exponent):
    out_data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def _sigmoid_array(x):
    # tanh keeps this overflow-free in one vectorized pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out_data = _sigmoid_array(a.data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def silu(a):
    s = _sigmoid_array(a.data)
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * (s + out_data * (1.0 - s)))

    return _make(out_data, (a,), backward)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Fused GroupNorm over (B, C, L): normalize per (group, batch) across the
    group's channels and all positions, then scale/shift per channel."""
    b, c, l = x.data.shape
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, c, l)
    gam = gamma.data.reshape(1, c, 1)
    out_data = xhat * gam + beta.data.reshape(1, c, 1)

    def backward(g):
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.sum(axis=(0, 2)))
        if gamma.requires_grad or gamma._parents:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if x.requires_grad or x._parents:
            dxhat = (g * gam).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = (dxhat - m1 - xh * m2) * inv
            x._accumulate(dx.reshape(b, c, l))

    return _make(out_data, (x, gamma, beta), backward)


# shape ops -----------------------------------------------------------------


def reshape(a, shape):
    src_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(src_shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes=()):
    axes = tuple(axes) or tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(out_data, (a,), backward)


def take(a, key):
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def concatenate(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


# reductions ----------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward)


# linear algebra ------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def linear(x, weight, bias=None):
    """x @ weight (+ bias); x is (..., in), weight (in, out), bias (out,)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# neural-net kernels --------------------------------------------------------


def _im2col(xp, kernel, stride):
    b, c, lp = xp.shape
    l_out = (lp - kernel) // stride + 1
    sb, sc, sl = xp.strides
    cols = as_strided(
        xp,
        shape=(b, l_out, c, kernel),
        strides=(sb, sl * stride, sc, sl),
        writeable=False,
    )
    return np.ascontiguousarray(cols).reshape(b, l_out, c * kernel), l_out


def conv1d(x, weight, bias, stride=1, padding=0):
    """Temporal convolution: x (B, Cin, L), weight (Cout, Cin, k), bias (Cout,)."""
    b, c_in, l = x.data.shape
    c_out, c_in_w, kernel = weight.data.shape
    if c_in_w != c_in:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, weight {c_in_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols, l_out = _im2col(xp, kernel, stride)
    w_flat = weight.data.reshape(c_out, c_in * kernel)
    y = cols @ w_flat.T + bias.data
    out_data = np.ascontiguousarray(y.transpose(0, 2, 1))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # (B, Lout, Cout)
        if weight.requires_grad or weight._parents:
            gw = gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * kernel)
            weight._accumulate(gw.reshape(c_out, c_in, kernel))
        if bias.requires_grad or bias._parents:
            bias._accumulate(gt.sum(axis=(0, 1)))
        if x.requires_grad or x._parents:
            dcols = (gt @ w_flat).reshape(b, l_out, c_in, kernel)
            dxp = np.zeros_like(xp)
            for k in range(kernel):
                dxp[:, :, k : k + stride * l_out : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
            x._accumulate(dxp[:, :, padding : padding + l] if padding else dxp)

    return _make(out_data, (x, weight, bias), backward)


def upsample_nearest(x, factor=2):
    """Repeat each position along the last (temporal) axis."""
    out_data = np.repeat(x.data, factor, axis=-1)

    def backward(g):
        shape = g.shape[:-1] + (g.shape[-1] // factor, factor)
        x._accumulate(g.reshape(shape).sum(axis=-1))

    return _make(out_data, (x,), backward)
