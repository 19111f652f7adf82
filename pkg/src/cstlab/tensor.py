"""Small reverse-mode autodiff core on top of numpy.

Only the operations the recurrent encoder and the constraint losses need are
provided. Operations executed while a :class:`Tape` is active are recorded on
it; :meth:`Tape.backward` replays the record in reverse to populate ``.grad``
on every tensor created with ``requires_grad=True``.

Leading batch axes are allowed everywhere (matmul broadcasts like
``numpy.matmul``), which is what lets a whole minibatch go through one
forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, UsageError

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
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

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


@dataclass
class Tape:
    """Ordered record of executed operations.

    Use as a context manager; every op run inside the block whose inputs need
    gradients is appended in execution order.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, inputs, backward_fn))

    def backward(self, loss):
        backward(loss, self)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss, tape):
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; callers zero them explicitly.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.out.grad = None
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                gi = _unbroadcast(gi, inp.data.shape)
            inp.grad = gi if inp.grad is None else inp.grad + gi
    for node in tape.nodes:
        node.out.grad = None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def log(a, floor=None):
    """Natural log; ``floor`` clamps the argument away from zero."""
    ad = a.data
    if floor is not None:
        ad = np.maximum(ad, floor)
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_K * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_K * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _make(out, (a,), bw)


def binarize_ste(a):
    """Hard threshold at 0.5 (inclusive) with an identity backward pass."""
    out = (a.data >= 0.5).astype(a.dtype)
    return _make(out, (a,), lambda g: (g,))


def dropout(a, p, rng, train=True):
    """Inverted dropout. Identity when ``train`` is false or ``p == 0``."""
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------------------
# shape and reductions


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def index(a, key):
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), bw)


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array of any shape."""
    indices = np.asarray(indices)
    shape, dtype = a.shape, a.dtype
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        # move the gathered axes to the front so add.at can scatter them
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def embedding(table, ids):
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalizers


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # shared weight: fold batch axes into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def _check_axis(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")


def softmax(a, axis=-1):
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma, x), as_tensor(beta, x)
    d = x.shape[-1]
    if gamma.shape[-1:] != (d,) or beta.shape[-1:] != (d,):
        raise DimensionError(f"layer_norm affine shape {gamma.shape}/{beta.shape} vs {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dxhat = g * gd
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def cross_entropy_masked(probs, labels, na=-1):
    """Negative log-likelihood of ``labels`` under row-stochastic ``probs``.

    ``probs`` has shape ``(..., t, c)`` and ``labels`` shape ``(..., t)`` with
    class ids in ``[0, c)`` or ``na``. NA positions contribute exactly zero.
    Returns the sum over all labeled positions.
    """
    labels = np.asarray(labels)
    c = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} vs probabilities {probs.shape}")
    known = labels != na
    if np.any(known & ((labels < 0) | (labels >= c))):
        raise DataError(f"label outside [0, {c}) and not NA")
    safe = np.where(known, labels, 0)
    p = np.take_along_axis(probs.data, safe[..., None], axis=-1)[..., 0]
    tiny = np.finfo(probs.dtype).tiny
    p = np.maximum(p, tiny)
    value = -np.sum(np.where(known, np.log(p), 0.0))

    def bw(g):
        full = np.zeros_like(probs.data)
        np.put_along_axis(full, safe[..., None], np.where(known, -g / p, 0.0)[..., None], axis=-1)
        return (full,)

    return _make(np.asarray(value, dtype=probs.dtype), (probs,), bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One Adam update with bias correction, applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    n_checked: int
    passed: bool


def rel_error(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(f, params, h=1e-5, tol=1e-4, floor=1e-7, max_per_param=None, rng=None):
    """Compare autodiff gradients of ``f(params)`` against central differences.

    The difference quotient carries a rounding error of about
    ``eps * |f| / h``; only the part of a discrepancy above that bound counts
    toward the relative error, so gradients that are exactly zero (such as a
    softmax shift) do not report rounding noise as error.
    ``f`` must be deterministic; parameters are perturbed in place and
    restored. ``max_per_param`` samples that many entries of each parameter
    (all entries when ``None``).
    """
    names = [p.name or f"p{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f(params)
    backward(loss, tape)
    base = loss.item()
    again = f(params).item()
    if base != again:
        raise UsageError(f"function is not deterministic: {base!r} != {again!r}")

    per_param = {}
    n_checked = 0
    for name, p in zip(names, params):
        flat = p.data.reshape(-1)
        grad = np.zeros(p.shape) if p.grad is None else p.grad.reshape(-1)
        grad = grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            noise = np.finfo(flat.dtype).eps * max(abs(fp), abs(fm)) / h
            err = max(abs(grad[i] - num) - noise, 0.0)
            worst = max(worst, float(err / max(abs(grad[i]), abs(num), floor)))
        per_param[name] = worst
        n_checked += len(idx)
    worst_all = max(per_param.values(), default=0.0)
    return GradCheckReport(worst_all, per_param, n_checked, worst_all < tol)
