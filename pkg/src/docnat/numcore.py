"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` records the op that produced it; ``backward`` walks the recorded
graph in reverse topological order.  Only the primitives the translation models
need are provided.  Everything runs in float64 unless a caller explicitly passes
float32 arrays (the speed benchmark does).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NEG_INF = -np.inf

_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Wrap an op result; ``bwd(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make(a.data * pos, (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=()) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """``table[idx]`` along axis 0; negative indices produce zero rows."""
    idx = np.asarray(idx)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = table.data[safe]
    if not valid.all():
        out = out * valid[..., None]
    n = table.shape[0]

    def bwd(g):
        gt = np.zeros_like(table.data)
        gg = g.reshape(-1, g.shape[-1]) if g.ndim > 1 else g.reshape(-1, 1)
        np.add.at(gt, safe.reshape(-1), gg * valid.reshape(-1, 1))
        return (gt.reshape(n, *table.shape[1:]),)

    return make(out, (table,), bwd)


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``a[..., idx[...]]`` along the last axis (target log-probs)."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} x {bd.shape}")

    def bwd(g):
        if bd.ndim == 2 and ad.ndim > 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make(ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalizers
# ---------------------------------------------------------------------------


def _lse(x: np.ndarray, axis=-1, keepdims=False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return s if keepdims else np.squeeze(s, axis=axis)


def logsumexp(v, axis=-1, keepdims=False) -> Tensor:
    """log(sum(exp(v))) with max-shift; all -inf entries give -inf."""
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ContractError("logsumexp of an empty array")
    out = _lse(v.data, axis=axis, keepdims=True)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            p = np.exp(v.data - out)
        p = np.where(np.isfinite(out), p, 0.0)
        return (gk * p,)

    return make(out if keepdims else np.squeeze(out, axis=axis), (v,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    out = xd - _lse(xd, axis=axis, keepdims=True)

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), bwd)


def log_softmax_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Log-probabilities over the true entries of ``mask`` (last axis), -inf elsewhere.

    Rows without any allowed entry are all -inf and receive no gradient.
    """
    xd = np.where(mask, x.data, NEG_INF)
    lse = _lse(xd, axis=-1, keepdims=True)
    live = np.isfinite(lse)
    with np.errstate(invalid="ignore"):
        out = np.where(mask & live, xd - lse, NEG_INF)
    p = np.exp(out)

    def bwd(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make(out, (x,), bwd)


def softmax_masked(logits, mask: np.ndarray) -> Tensor:
    """Softmax over positions where ``mask`` is true; zeros elsewhere.

    A row with no true entry returns all zeros.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        try:
            mask = np.broadcast_to(mask, logits.shape)
        except ValueError:
            raise DimensionError(f"mask {mask.shape} vs logits {logits.shape}") from None
    if mask.all():
        p = logits.data - logits.data.max(axis=-1, keepdims=True)
    else:
        p = np.where(mask, logits.data, NEG_INF)
        m = p.max(axis=-1, keepdims=True)
        p -= np.where(np.isfinite(m), m, 0.0)
    np.exp(p, out=p)
    s = p.sum(axis=-1, keepdims=True)
    s[s == 0] = 1.0
    p /= s

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make(p, (logits,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def bwd(g):
        gx_h = g * gd
        gx = inv * (gx_h - gx_h.mean(axis=-1, keepdims=True) - xh * (gx_h * xh).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xh.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return make(xh * gd + bias.data, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` for every leaf reachable from ``loss``.

    Returns the gradients of ``wrt`` (in order) when given.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo(loss)):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=p.data.dtype, copy=True)
            else:
                p.grad += g
        if node._parents:
            # interior node: free memory as soon as it is consumed
            node.grad = None
    if wrt is not None:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    return None


def grad_check(f: Callable[[dict], Tensor], params: dict[str, np.ndarray], eps: float = 1e-6) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |analytic|)."""
    if not 0 < eps <= 1e-3:
        raise ContractError("eps must lie in (0, 1e-3]")
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    out = f(leaves)
    backward(out)
    worst = 0.0
    for k, v in params.items():
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v)
        base = v.copy()
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            shifted = {kk: vv.copy() for kk, vv in params.items()}
            shifted[k][i] = base[i] + eps
            with no_grad():
                up = float(f({kk: Tensor(vv) for kk, vv in shifted.items()}).data)
            shifted[k][i] = base[i] - eps
            with no_grad():
                down = float(f({kk: Tensor(vv) for kk, vv in shifted.items()}).data)
            numeric = (up - down) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1.0, abs(a))
            if not math.isfinite(err):
                err = math.inf
            worst = max(worst, err)
    return worst
