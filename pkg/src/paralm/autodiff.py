"""Recording tape with hand-written vector-Jacobian products.

Every op here accepts plain ``ndarray`` operands and returns a plain array
when none of its inputs is a `Var`; the model forward is written once
against these ops and only records when trainable parameters are wrapped.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = grad
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root):
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
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def value(x):
    return x.value if isinstance(x, Var) else x


def _recording(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    av, bv = value(a), value(b)
    out = T.matmul(av, bv)
    if not _recording(a, b):
        return out

    def back(g):
        ga = gb = None
        if isinstance(a, Var):
            bt = np.ascontiguousarray(np.swapaxes(bv, -1, -2))
            ga = T.matmul(g, bt)
        if isinstance(b, Var):
            if bv.ndim == 2:
                k = av.shape[-1]
                a2 = np.ascontiguousarray(av.reshape(-1, k).T)
                gb = T.matmul(a2, np.ascontiguousarray(g.reshape(-1, g.shape[-1])))
            else:
                gb = T.matmul(np.ascontiguousarray(np.swapaxes(av, -1, -2)), g)
        return ga, gb

    return Var(out, (a, b), back)


def add(a, b):
    av, bv = value(a), value(b)
    out = T.track(av + bv)
    if not _recording(a, b):
        return out

    def back(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return Var(out, (a, b), back)


def mul(a, b):
    av, bv = value(a), value(b)
    out = T.track(av * bv)
    if not _recording(a, b):
        return out

    def back(g):
        ga = _unbroadcast(g * bv, np.shape(av)) if isinstance(a, Var) else None
        gb = _unbroadcast(g * av, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return Var(out, (a, b), back)


def scale(a, c: float):
    """Multiply by a Python constant."""
    av = value(a)
    out = T.track(av * c)
    if not _recording(a):
        return out
    return Var(out, (a,), lambda g: (g * c,))


def scale_rows(m, v):
    """Column-wise broadcast scaling (see `tensor.elementwise_scale_rows`)."""
    mv, vv = value(m), value(v)
    out = T.elementwise_scale_rows(mv, vv)
    if not _recording(m, v):
        return out

    def back(g):
        gm = gv = None
        if isinstance(m, Var):
            gm = g * (vv if vv.ndim == 1 else vv[..., None, :])
        if isinstance(v, Var):
            prod = g * mv
            if vv.ndim == 1:
                gv = prod.reshape(-1, prod.shape[-1]).sum(axis=0)
            else:
                gv = prod.sum(axis=-2)
        return gm, gv

    return Var(out, (m, v), back)


# In-place variants for inference: when nothing is recorded they overwrite
# their first argument, which must be a fresh array owned by the caller.


def add_(a, b):
    if _recording(a, b):
        return add(a, b)
    a += b
    return a


def scale_(a, c: float):
    if _recording(a):
        return scale(a, c)
    a *= c
    return a


def scale_rows_(m, v):
    if _recording(m, v):
        return scale_rows(m, v)
    return T.elementwise_scale_rows(m, v, out=m)


def activation(x, name: str):
    fn, dfn = T.ACTIVATIONS[name]
    xv = value(x)
    out = fn(xv)
    if not _recording(x):
        return out
    return Var(out, (x,), lambda g: (g * dfn(xv),))


def softmax(x):
    xv = value(x)
    y = T.softmax_rows(xv)
    if not _recording(x):
        return y

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Var(y, (x,), back)


def rmsnorm(x, w, eps: float):
    xv, wv = value(x), value(w)
    ms = np.mean(xv * xv, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = xv * r
    out = T.track(xhat * wv)
    if not _recording(x, w):
        return out

    def back(g):
        gx = gw = None
        if isinstance(x, Var):
            gh = g * wv
            d = xv.shape[-1]
            gx = r * gh - xhat * (r * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        if isinstance(w, Var):
            gw = (g * xhat).reshape(-1, xv.shape[-1]).sum(axis=0)
        return gx, gw

    return Var(out, (x, w), back)


def rope(x, cos, sin):
    """Rotate interleaved-free halves: x = [x1, x2] -> [x1 c - x2 s, x2 c + x1 s]."""
    xv = value(x)
    h = xv.shape[-1] // 2
    x1, x2 = xv[..., :h], xv[..., h:]
    out = T.track(np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1))
    if not _recording(x):
        return out

    def back(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return Var(out, (x,), back)


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    if not _recording(x):
        return out
    return Var(out, (x,), lambda g: (g.reshape(xv.shape),))


def swapaxes(x, a1, a2):
    xv = value(x)
    out = np.swapaxes(xv, a1, a2)
    if not _recording(x):
        return out
    return Var(out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, idx):
    xv = value(x)
    out = xv[idx]
    if not _recording(x):
        return out

    def back(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return Var(out, (x,), back)


def embedding(table, ids):
    tv = value(table)
    out = T.track(tv[ids])
    if not _recording(table):
        return out

    def back(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (full,)

    return Var(out, (table,), back)


def cross_entropy(logits, targets, mask):
    """Mean next-token cross-entropy over positions where ``mask`` is true."""
    lv = value(logits)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: empty target mask")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    tgt = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n
    out = np.asarray(loss, dtype=lv.dtype)
    if not _recording(logits):
        return out

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return ((p - onehot) * mask[..., None] * (g / n),)

    return Var(out, (logits,), back)
