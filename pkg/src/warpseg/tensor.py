"""Small reverse-mode autograd over float64 numpy arrays.

Only the handful of operators the segmentation networks need are provided.
Every op returns a new :class:`Tensor` whose ``_backward`` maps the upstream
gradient to one gradient per parent (``None`` where a parent needs none).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# MAC accounting hook used by the FLOP tests.
_mac_counter = None


@contextlib.contextmanager
def count_macs():
    """Accumulate conv multiply-accumulates executed inside the block."""
    global _mac_counter
    prev = _mac_counter
    box = [0]
    _mac_counter = box
    try:
        yield box
    finally:
        _mac_counter = prev


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x):
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def sum_all(x):
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    shape, n = x.shape, x.size
    return _make(np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of an N×C×H×W input with O×C×K×K weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {cw} "
                         f"(input {x.shape}, weights {w.shape})")
    if kh != kw:
        raise ShapeError(f"conv2d: square kernels only, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # channels-last im2col, taps ordered (row, col, channel); one contiguous copy per tap
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    taps = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate([xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in taps],
                          axis=-1).reshape(n * ho * wo, k * k * c)
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if _mac_counter is not None:
        _mac_counter[0] += n * o * c * k * k * ho * wo
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(n, ho, wo, k * k, c)
            gxh = np.zeros((n, hp, wp, c))
            for t, (i, j) in enumerate(taps):
                gxh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, t, :]
            gxp = gxh.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def _resize_matrix(n_in, n_out):
    # align_corners=False source coordinates, clamped at the low edge
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of an N×C×H×W tensor (half-pixel centres)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target size must be positive, got {out_h}x{out_w}")
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    ry = _resize_matrix(h, out_h)
    rx = _resize_matrix(w, out_w)
    out = ry @ x.data @ rx.T
    return _make(out, (x,),
                 lambda g: (ry.T @ g @ rx,))


def upsample2x(x):
    return bilinear_resize(x, 2 * x.shape[-2], 2 * x.shape[-1])


def upsample_nearest2x(x):
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    n, c, h, w = x.shape
    return _make(out, (x,),
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def softmax_cross_entropy(logits, labels, ignore_index=255):
    """Mean negative log-likelihood over pixels whose label is not ``ignore_index``."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 4 or labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(f"logits {z.shape} and labels {labels.shape} disagree")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        return _make(np.array(0.0), (logits,), lambda g: (np.zeros_like(z),))
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(denom)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        p = ez / denom
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return (g * (p - onehot) * valid[:, None] / count,)

    return _make(np.array(loss), (logits,), backward)


def l2_consistency(a, b):
    """Mean squared difference; ``b`` is a fixed target and receives no gradient."""
    b_data = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b_data.shape:
        raise ShapeError(f"l2_consistency: shapes {a.shape} and {b_data.shape} differ")
    diff = a.data - b_data
    n = diff.size
    return _make(np.array((diff ** 2).sum() / n), (a,), lambda g: (g * 2.0 * diff / n,))


def weight_decay(params):
    """Sum of squared entries over the given tensors."""
    params = list(params)
    if not params:
        return Tensor(0.0)
    total = np.array(sum(float((p.data ** 2).sum()) for p in params))
    return _make(total, tuple(params), lambda g: tuple(2.0 * g * p.data for p in params))


def kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(params, state):
    """One bias-corrected Adam update over a name -> Tensor mapping.

    Parameters are rebound to new arrays rather than mutated in place.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing}")
    for name, p in params.items():
        if state.first_moment[name].shape != p.shape:
            raise ShapeError(f"adam_step: moment shape mismatch for {name}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def numerical_grad(fn, arrays, eps=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = fn(*arrays)
            arr[idx] = orig - eps
            lo = fn(*arrays)
            arr[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Max elementwise difference scaled by the larger gradient's max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(build, arrays, eps=1e-5, seed=0):
    """Compare autograd against finite differences for ``build(*tensors) -> Tensor``.

    The output is reduced to a scalar by a fixed random projection so that
    every output element contributes. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    (out * proj).sum().backward()
    numeric = numerical_grad(scalar, arrays, eps)
    return max(relative_error(l.grad if l.grad is not None else np.zeros_like(l.data), n)
               for l, n in zip(leaves, numeric))
