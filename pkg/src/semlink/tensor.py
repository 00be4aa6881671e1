"""Minimal reverse-mode differentiable tensor engine.

Tensors wrap a numpy array. Every differentiable op records its parents and a
closure mapping the output gradient to one gradient per parent; ``backward``
walks the graph in reverse topological order and accumulates into ``.grad``.
Float32 is the default precision; float64 is reserved for oracle checks and
bit-exact determinism runs (see :func:`precision`).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional real array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; lists and scalars get the default
            keep = isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else _DEFAULT_DTYPE
        self.data = arr.astype(dtype, copy=False)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autograd ------------------------------------------------------------
    def backward(self, grad=None):
        """Backpropagate from this tensor; a scalar uses an implicit gradient of 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pg = np.asarray(pg, dtype=parent.data.dtype)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a, _dtype_hint(b)), as_tensor(b, _dtype_hint(a))
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a, _dtype_hint(b)), as_tensor(b, _dtype_hint(a))
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a, _dtype_hint(b)), as_tensor(b, _dtype_hint(a))
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a, _dtype_hint(b)), as_tensor(b, _dtype_hint(a))
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def _dtype_hint(x):
    if isinstance(x, Tensor):
        return x.data.dtype
    return None


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clamp_min(x, floor):
    """``max(x, floor)``; gradient passes only where the input is above the floor."""
    mask = x.data >= floor
    out = np.where(mask, x.data, np.asarray(floor, dtype=x.data.dtype))
    return _make(out, (x,), lambda g: (g * mask,))


# -- shape ops ----------------------------------------------------------------
def reshape(x, shape):
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward)


def pad_spatial(x, pad):
    """Zero-pad axes 1 and 2 of an NHWC tensor by ``pad`` on every side."""
    if pad == 0:
        return x
    out = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    return _make(out, (x,), lambda g: (g[:, pad:-pad, pad:-pad, :],))


def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast like numpy)."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def dense(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of an arbitrary-rank input."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[-1],))


# -- normalisation and losses ---------------------------------------------
def softmax(x, axis=-1):
    """Numerically stable softmax. NaN inputs propagate to NaN outputs."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    c = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / c * (c * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


def mse_loss(pred, target):
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)
    return _make(out, (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# -- convolution --------------------------------------------------------------
def conv2d(x, kernel, bias=None, stride=1):
    """'Same'-padded cross-correlation of an NHWC input with a ``k x k x Cin x Cout`` kernel.

    ``stride`` 2 halves even spatial sizes. The patch gather/scatter runs in the
    compiled kernel when available.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), kernel, bias, stride)
        return reshape(y, y.shape[1:])
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if x.shape[-1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    n, h, w, _ = x.shape
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dtype = np.result_type(x.data, kernel.data)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = kernels.im2col(xp, k, stride, ho, wo)
    flat_cols = cols.reshape(n * ho * wo, k * k * cin)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = (flat_cols @ wmat).reshape(n, ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (flat_cols.T @ g2).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
            gxp = kernels.col2im(gcols, h + 2 * pad, w + 2 * pad, stride)
            gx = gxp[:, pad:pad + h, pad:pad + w, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


def upsample2(x):
    """Nearest-neighbour 2x spatial upsampling of an (N)HWC tensor."""
    hax = x.ndim - 3
    out = np.repeat(np.repeat(x.data, 2, axis=hax), 2, axis=hax + 1)

    def backward(g):
        shape = list(x.shape)
        shape.insert(hax + 1, 2)
        shape.insert(hax + 3, 2)
        return (g.reshape(shape).sum(axis=(hax + 1, hax + 3)),)

    return _make(out, (x,), backward)


def space_to_depth2(x):
    """Fold each 2x2 spatial block of an NHWC tensor into the channel axis."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError("spatial dims must be even")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4 * c)

    def backward(g):
        return (g.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c),)

    return _make(out, (x,), backward)


def gather_rows(table, index):
    """``table[..., index]`` along the last axis; gradient scatter-adds into the table."""
    out = table.data[..., index]

    def backward(g):
        lead = table.shape[:-1]
        flat = g.reshape(lead + (-1,))
        gt = np.zeros((int(np.prod(lead, dtype=int)), table.shape[-1]), dtype=g.dtype)
        idx = index.reshape(-1)
        for row, src in zip(gt, flat.reshape(gt.shape[0], -1)):
            row += np.bincount(idx, weights=src, minlength=table.shape[-1])
        return (gt.reshape(table.shape),)

    return _make(out, (table,), backward)


def custom_op(inputs, forward, backward):
    """Build a one-off differentiable op from numpy callables (used by tests and
    the channel layer). ``backward(g, *arrays)`` returns one gradient per input."""
    arrs = [t.data for t in inputs]
    out = np.asarray(forward(*arrs))
    return _make(out, tuple(inputs), lambda g: backward(g, *arrs))


# -- optimiser ------------------------------------------------------------------
@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            [np.zeros_like(p.data) for p in params],
            [np.zeros_like(p.data) for p in params],
            0,
            lr,
            beta1,
            beta2,
            epsilon,
        )


def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place on ``params``. Missing grads count as zero."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)
    return params, state


# -- gradient checking ------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_tensor: list

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(f, inputs, tol=1e-4, *, dtype=np.float64, h=1e-3, extra=()):
    """Compare backprop gradients against central finite differences.

    ``f(*inputs)`` must return a scalar tensor. Tensors in ``extra`` (e.g. module
    parameters read through a closure) are checked as well. The analytic pass runs
    at ``dtype``; the finite differences always run in float64 with a
    Richardson-extrapolated central difference at base step ``h``. The error for each
    tensor is ``max|analytic - numeric| / max|numeric|``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    wrt = inputs + [t for t in extra]
    saved = [(t.data, t.requires_grad, t.grad) for t in wrt]

    def cast(dt):
        for t, (d, _, _) in zip(wrt, saved):
            t.data = d.astype(dt, copy=True)

    try:
        cast(dtype)
        for t in wrt:
            t.requires_grad = True
            t.grad = None
        out = f(*inputs)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        out.backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in wrt]

        cast(np.float64)
        with no_grad():

            def value():
                return float(f(*inputs).data)

            def central(t, i, step):
                flat = t.data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + step
                fp = value()
                flat[i] = orig - step
                fm = value()
                flat[i] = orig
                return (fp - fm) / (2 * step)

            numeric = []
            for t in wrt:
                num = np.zeros(t.size)
                for i in range(t.size):
                    d1 = central(t, i, h)
                    d2 = central(t, i, h / 2)
                    num[i] = (4.0 * d2 - d1) / 3.0
                numeric.append(num.reshape(t.shape))
    finally:
        for t, (d, rg, g) in zip(wrt, saved):
            t.data, t.requires_grad, t.grad = d, rg, g

    errs = []
    for a, n in zip(analytic, numeric):
        scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-12)
        errs.append(float(np.max(np.abs(a - n)) / scale))
    worst = max(errs) if errs else 0.0
    return GradCheckReport(worst if math.isfinite(worst) else math.inf, tol, errs)
