"""Minimal dense tensor with reverse-mode differentiation.

Only the operators the segmentation model and its losses need are provided.
Every operator records a backward closure on its output; ``Tensor.backward``
walks the recorded graph in reverse topological order.
"""

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "BackwardError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs",
    "exp",
    "log",
    "clamp",
    "relu",
    "sum",
    "mean",
    "max",
    "softmax",
    "log_softmax",
    "matmul",
    "transpose",
    "reshape",
    "take",
    "concat",
    "conv1d",
    "maxpool1d",
    "dropout",
    "resize_linear",
]


class BackwardError(RuntimeError):
    """Raised when a backward sweep cannot be carried out."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forwards)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD.

    ``parents`` and ``backward_fn`` are set by the operator that produced the
    tensor. ``backward_fn(g)`` returns one gradient (or ``None``) per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # operator sugar
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

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``self`` must be scalar unless an explicit output gradient is given.
        Repeated calls accumulate, as with any leaf gradient slot.
        """
        if grad is None:
            if self.data.size != 1:
                raise BackwardError(f"backward seed must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise BackwardError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node.backward_fn is None:
                raise BackwardError(f"no backward rule registered for op '{node.op}'")
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise BackwardError(
                        f"op '{node.op}' produced grad of shape {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(x, requires_grad=False, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a):
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where the input was inside the range."""
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# reductions ----------------------------------------------------------------

def sum(a, axis=None):
    shape = a.shape
    if axis is not None:
        axis = _check_axis(axis, a.ndim)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis=None):
    shape = a.shape
    if axis is not None:
        axis = _check_axis(axis, a.ndim)
        n = shape[axis]
    else:
        n = a.data.size

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), backward, "mean")


def max(a, axis):
    """Max over ``axis``; the gradient goes to the first arg-max."""
    axis = _check_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (ga,)

    return _make(out, (a,), backward, "max")


def softmax(a, axis=-1):
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# linear algebra and indexing ----------------------------------------------

def matmul(a, b):
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index, axis):
    """Select entries of ``a`` along ``axis`` (a view into a's storage for autodiff)."""
    axis = _check_axis(axis, a.ndim)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * a.ndim
        if len(np.unique(index)) == len(index):
            sl[axis] = index
            ga[tuple(sl)] += g
        else:
            np.add.at(ga, tuple(sl[:axis] + [index]), g)
        return (ga,)

    return _make(out, (a,), backward, "take")


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = _check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# temporal operators --------------------------------------------------------

def conv1d(x, weight, bias, dilation=1):
    """Length-preserving dilated 1-d cross-correlation.

    x is (T, Cin), weight (k, Cin, Cout) with k odd, bias (Cout,). The input is
    zero padded by ``dilation * (k - 1) / 2`` frames on both sides.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    k, cin, cout = weight.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.ndim != 2 or x.shape[1] != cin:
        raise ValueError(f"input channels {x.shape} do not match weight {weight.shape}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    T = x.shape[0]
    xd, wd = x.data, weight.data

    if k == 1:
        w2 = wd[0]
        out = xd @ w2 + bias.data

        def backward(g):
            return g @ w2.T, (xd.T @ g)[None], g.sum(axis=0)

        return _make(out, (x, weight, bias), backward, "conv1d")

    pad = dilation * (k - 1) // 2
    xp = np.zeros((T + 2 * pad, cin), dtype=xd.dtype)
    xp[pad:pad + T] = xd
    cols = np.concatenate([xp[i * dilation:i * dilation + T] for i in range(k)], axis=1)
    w2 = wd.reshape(k * cin, cout)
    out = cols @ w2 + bias.data

    def backward(g):
        gcols = g @ w2.T
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[i * dilation:i * dilation + T] += gcols[:, i * cin:(i + 1) * cin]
        gw = (cols.T @ g).reshape(k, cin, cout)
        return gxp[pad:pad + T], gw, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward, "conv1d")


def maxpool1d(x, kernel=2, stride=2):
    """Max over disjoint pairs of frames; a trailing odd frame is dropped."""
    if kernel != 2 or stride != 2:
        raise ValueError("only kernel=2, stride=2 is supported")
    T = x.shape[0]
    if T < 2:
        raise ValueError(f"maxpool1d needs at least 2 frames, got {T}")
    n = T // 2
    pairs = x.data[:2 * n].reshape(n, 2, *x.shape[1:])
    # ties go to the earlier frame
    second = pairs[:, 1] > pairs[:, 0]
    out = np.where(second, pairs[:, 1], pairs[:, 0])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gp = gx[:2 * n].reshape(n, 2, *x.shape[1:])
        gp[:, 0] = np.where(second, 0, g)
        gp[:, 1] = np.where(second, g, 0)
        return (gx,)

    return _make(out, (x,), backward, "maxpool1d")


def dropout(x, p, rng=None, training=True):
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _resize_matrix(n_in, n_out, dtype):
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    R = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        R[:, 0] = 1.0
        return R
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    R[rows, lo] = 1.0 - frac
    R[rows, lo + 1] += frac
    return R


def resize_linear(x, n_out):
    """Stretch a (T', C) tensor to (n_out, C) along time with align-corners interpolation."""
    n_in = x.shape[0]
    if n_in == n_out:
        return x
    R = _resize_matrix(n_in, n_out, x.dtype)
    return _make(R @ x.data, (x,), lambda g: (R.T @ g,), "resize_linear")
