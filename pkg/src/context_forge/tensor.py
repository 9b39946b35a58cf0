"""Dense float tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when gradients are enabled and any
input requires them, the output records its parents and a closure mapping
the output gradient to input gradients.  :func:`backward` walks the graph in
reverse topological order and frees it afterwards.

Shapes must match exactly.  The only broadcasts are a bias vector added
along the last axis and 0-d (scalar) operands.
"""

import contextlib
import threading

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError

__all__ = [
    "Tensor", "backward", "no_grad", "default_dtype", "get_dtype", "finite_checks",
    "count_macs", "add", "sub", "mul", "scale", "matmul", "transpose", "reshape",
    "concat", "tensor_sum", "tensor_mean", "sigmoid", "gelu", "softmax", "softmax_rows",
    "layer_norm", "smooth_l1", "pixel_cross_entropy", "masked_replace", "conv3x3",
]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.check_finite = True
        self.mac_counter = None


_state = _State()


def get_dtype():
    return _state.dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily create tensors with ``dtype`` (float64 is used by gradient checks)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled):
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_tag = {}

    def add(self, n, tag):
        self.total += int(n)
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(n)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by matmul and conv ops."""
    prev = _state.mac_counter
    counter = MacCounter()
    _state.mac_counter = counter
    try:
        yield counter
    finally:
        _state.mac_counter = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != _state.dtype:
            arr = arr.astype(_state.dtype)
        if _state.check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, parents, backward_fn, opname):
    if data.dtype != _state.dtype:
        data = data.astype(_state.dtype)
    if _state.check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{opname} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _count(n, tag):
    if _state.mac_counter is not None:
        _state.mac_counter.add(n, tag)


def _fsum(x, axis=None, keepdims=False):
    # reductions accumulate in float64 and are cast back by the caller
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _result(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add")
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        def bw(g):
            return g, _fsum(g.reshape(-1, n), axis=0).astype(g.dtype)
        return _result(a.data + b.data, (a, b), bw, "add")
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a, s):
    """Multiply by a python number or a 0-d tensor."""
    a = _as_tensor(a)
    if isinstance(s, Tensor):
        if s.ndim != 0:
            raise ShapeError(f"scale: expected a 0-d scalar tensor, got shape {s.shape}")
        sv = s.data
        def bw(g):
            return g * sv, np.asarray(_fsum(g * a.data), dtype=g.dtype)
        return _result(a.data * sv, (a, s), bw, "scale")
    c = a.data.dtype.type(s)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b):
    if not isinstance(b, Tensor) or b.ndim == 0:
        return scale(a, b)
    if isinstance(a, Tensor) and a.ndim == 0:
        return scale(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sigmoid(x):
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf)).astype(xd.dtype),

    return _result(out, (x,), bw, "gelu")


# ------------------------------------------------------------------- algebra

def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or a batched product with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape
        if a.shape[-1] != k:
            raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)
        _count(a2.shape[0] * k * n, "matmul")
        out = (a2 @ b.data).reshape(lead + (n,))
        bd = b.data

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), bw, "matmul")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} are incompatible")
    _count(int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1], "matmul")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return _result(out, (a, b), bw, "matmul")


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def _getitem(a, index):
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    src = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def tensor_sum(a, axis=None, keepdims=False):
    out = _fsum(a.data, axis=axis, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(g.dtype),)

    return _result(np.asarray(out), (a,), bw, "sum")


def tensor_mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    s = tensor_sum(a, axis, keepdims)
    return scale(s, 1.0 / count)


# ------------------------------------------------------------ normalisations

def softmax(x, axis=-1):
    xd = x.data
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / _fsum(e, axis=axis, keepdims=True)
    out = out.astype(xd.dtype)

    def bw(g):
        inner = _fsum(g * out, axis=axis, keepdims=True).astype(g.dtype)
        return (out * (g - inner),)

    return _result(out, (x,), bw, "softmax")


def softmax_rows(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        g64 = g.astype(np.float64)
        dxhat = g64 * gamma.data
        t1 = dxhat.mean(axis=-1, keepdims=True)
        t2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - t1 - xhat * t2)
        gl = g64.reshape(-1, d)
        dgamma = (gl * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = gl.sum(axis=0)
        dt = g.dtype
        return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)

    return _result(out, (x, gamma, beta), bw, "layer_norm")


# --------------------------------------------------------------------- losses

def smooth_l1(pred, target, mask):
    """Mean smooth-L1 (beta 1) over positions where ``mask == 1``; 0 if none are masked."""
    pred = _as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if tgt.shape != pred.shape or m.shape != pred.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape}, {tgt.shape}, {m.shape} differ")
    m = m.astype(np.float64)
    count = m.sum()
    d = pred.data.astype(np.float64) - tgt
    ad = np.abs(d)
    small = ad < 1.0
    per = np.where(small, 0.5 * d * d, ad - 0.5)
    value = (per * m).sum() / count if count > 0 else 0.0

    def bw(g):
        if count == 0:
            return (np.zeros(pred.shape, dtype=g.dtype),)
        grad = np.where(small, d, np.sign(d)) * m * (float(g) / count)
        return (grad.astype(g.dtype),)

    return _result(np.asarray(value), (pred,), bw, "smooth_l1")


def pixel_cross_entropy(logits, labels):
    """Mean per-pixel cross-entropy; classes on axis -3 (``[..., C, H, W]``)."""
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim < 3 or logits.shape[:-3] + logits.shape[-2:] != labels.shape:
        raise ShapeError(f"pixel_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lab = labels.astype(np.int64)
    c = logits.shape[-3]
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= c:
        raise ContractError("pixel_cross_entropy: labels out of class range")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=-3, keepdims=True)
    ez = np.exp(z - zmax)
    lse = zmax + np.log(ez.sum(axis=-3, keepdims=True))
    picked = np.take_along_axis(z, np.expand_dims(lab, -3), axis=-3)
    n = lab.size
    value = (lse - picked).sum() / n

    def bw(g):
        p = ez / ez.sum(axis=-3, keepdims=True)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(lab, -3), 1.0, axis=-3)
        return (((p - onehot) * (float(g) / n)).astype(g.dtype),)

    return _result(np.asarray(value), (logits,), bw, "pixel_cross_entropy")


# ------------------------------------------------------------------- network

def masked_replace(x, mask, token):
    """Replace vectors of ``x[..., d]`` where ``mask`` is true by ``token[d]``."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1] or token.shape != (x.shape[-1],):
        raise ShapeError(f"masked_replace: x {x.shape}, mask {m.shape}, token {token.shape}")
    me = m[..., None]
    out = np.where(me, token.data, x.data)
    d = x.shape[-1]

    def bw(g):
        gx = np.where(me, 0, g).astype(g.dtype)
        gt = _fsum(g[m].reshape(-1, d), axis=0).astype(g.dtype)
        return gx, gt

    return _result(out, (x, token), bw, "masked_replace")


def _im2col3x3(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def conv3x3(x, weight, bias):
    """Zero-padded stride-1 3x3 convolution on channels-last ``[N, H, W, C]`` input."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[:3] != (3, 3, x.shape[-1]):
        raise ShapeError(f"conv3x3: input {x.shape} incompatible with kernel {weight.shape}")
    n, h, w, c = x.shape
    o = weight.shape[-1]
    if bias.shape != (o,):
        raise ShapeError(f"conv3x3: bias shape {bias.shape} != ({o},)")
    cols = _im2col3x3(x.data)
    wmat = weight.data.reshape(9 * c, o)
    _count(n * h * w * 9 * c * o, "conv")
    out = (cols @ wmat + bias.data).reshape(n, h, w, o)

    def bw(g):
        g2 = g.reshape(-1, o)
        dw = (cols.T @ g2).reshape(weight.shape)
        db = _fsum(g2, axis=0).astype(g.dtype)
        # the input gradient is a correlation of g with the flipped, transposed kernel
        wflip = np.ascontiguousarray(weight.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(9 * o, c)
        dx = (_im2col3x3(g) @ wflip).reshape(n, h, w, c)
        return dx, dw, db

    return _result(out, (x, weight, bias), bw, "conv3x3")


# ------------------------------------------------------------------- backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward() requires a scalar tensor")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
