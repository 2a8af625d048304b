"""Dense float64 tensors with a reverse-mode tape.

Only the kernels the model needs exist here. Each differentiable op records
its parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` walks the resulting DAG in reverse topological order.
The tape is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import backend

DTYPE = np.float64

_grad_enabled = True


class TensorError(ValueError):
    """Base class for kernel precondition failures."""


class ShapeError(TensorError):
    pass


class RankError(TensorError):
    pass


class DegenerateError(TensorError):
    """Degenerate input: all -inf softmax row, zero-norm vector, zero mass."""


class SupportError(TensorError):
    """KL support violation: p > 0 where q == 0."""


class NormalizationError(TensorError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- metadata -------------------------------------------------------
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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_rank(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- autograd -------------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every tape node reachable from this scalar.

        Leaf gradients accumulate across calls; interior gradients are reset.
        """
        if self.data.size != 1:
            raise RankError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        for node in order:
            if not node.is_leaf:
                node.grad = None
        self.grad = _accumulate(self.grad if self.is_leaf else None, np.ones_like(self.data), True)
        for node in reversed(order):
            if node.is_leaf or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    g = _unbroadcast(g, parent.shape)
                parent.grad = _accumulate(parent.grad, g, parent.is_leaf)

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _raise_rank(t):
    raise RankError(f"item() needs a single-element tensor, got shape {t.shape}")


def _accumulate(current, g, owned=False):
    # Interior gradients may alias buffers shared between parents, so they
    # are never updated in place; leaves get a private copy.
    if current is None:
        return np.array(g, dtype=DTYPE, copy=True) if owned else g
    return current + g


def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): one flat GEMM; the weight gradient is a single
        # (k, N) @ (N, n) product instead of a per-batch stack summed after.
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((a2 @ bd).reshape(lead + (bd.shape[1],)), (a, b), bw_flat)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation and activations (hot kernels dispatch to the backend)
# ---------------------------------------------------------------------------
def softmax_with_bias(logits, bias=None):
    """Softmax over the last axis of ``logits + bias``.

    ``bias`` is a constant array broadcast over leading axes: its shape must
    equal the trailing ``(rows, cols)`` of ``logits`` (or ``(cols,)`` for a
    vector). Entries of ``-inf`` are hard masks and produce exact zeros.
    """
    x = as_tensor(logits)
    if x.ndim == 0:
        raise ShapeError("softmax_with_bias needs at least one axis")
    cols = x.shape[-1]
    rows_tail = x.shape[-2] if x.ndim >= 2 else 1
    if bias is None:
        b2 = np.zeros((1, cols))
    else:
        b2 = np.asarray(bias.data if isinstance(bias, Tensor) else bias, dtype=DTYPE)
        if b2.ndim == 1:
            b2 = b2[None, :]
        if b2.shape != (rows_tail, cols) and b2.shape != (1, cols):
            raise ShapeError(f"softmax_with_bias: bias {b2.shape} vs logits {x.shape}")
        if np.isnan(b2).any() or np.isposinf(b2).any():
            raise TensorError("softmax_with_bias: bias must be finite or -inf")
    x2 = x.data.reshape(-1, cols)
    try:
        y2 = backend.active.softmax_bias_fwd(x2, np.ascontiguousarray(b2))
    except FloatingPointError as exc:
        raise DegenerateError(str(exc)) from None
    shape = x.shape

    def bw(g):
        return (backend.active.softmax_bwd(y2, np.ascontiguousarray(g).reshape(-1, cols)).reshape(shape),)

    return _node(y2.reshape(shape), (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must be ({n},)")
    shape = x.shape
    y, xhat, rstd = backend.active.layernorm_fwd(x.data.reshape(-1, n), gamma.data, beta.data, float(eps))

    def bw(g):
        dx, dg, db = backend.active.layernorm_bwd(
            np.ascontiguousarray(g).reshape(-1, n), xhat, rstd, gamma.data
        )
        return dx.reshape(shape), dg, db

    return _node(y.reshape(shape), (x, gamma, beta), bw)


def gelu(x):
    xd = x.data
    return _node(backend.active.gelu_fwd(xd), (x,), lambda g: (backend.active.gelu_bwd(xd, g),))


# ---------------------------------------------------------------------------
# lookups and losses
# ---------------------------------------------------------------------------
def embedding(table, ids):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TensorError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), bw)


def cross_entropy(logits, targets, ignore_index=-1):
    """Mean token cross-entropy over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows vs {targets.shape[0]} targets")
    keep = targets != ignore_index
    if ((targets[keep] < 0) | (targets[keep] >= v)).any():
        raise TensorError(f"cross_entropy: token id out of vocab [0, {v})")
    count = int(keep.sum())
    if count == 0:
        raise TensorError("cross_entropy: no scored positions")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.flatnonzero(keep)
    loss = float((lse[rows] - z[rows, targets[rows]]).sum() / count)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (float(np.asarray(g).reshape(-1)[0]) / count),)

    return _node(np.array(loss), (logits,), bw)


def cosine_similarity(a, b):
    """Cosine similarity along the last axis; shape is the leading shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateError("cosine_similarity: zero-norm vector")
    dot = (ad * bd).sum(axis=-1)
    cos = dot / (na * nb)

    def bw(g):
        g = np.asarray(g)[..., None]
        c = cos[..., None]
        ga = g * (bd / (na * nb)[..., None] - c * ad / (na * na)[..., None]) if a.requires_grad else None
        gb = g * (ad / (na * nb)[..., None] - c * bd / (nb * nb)[..., None]) if b.requires_grad else None
        return ga, gb

    return _node(cos, (a, b), bw)


def kl_divergence(p, q, tol=1e-9):
    """KL(p || q) along the last axis, natural log, with 0 ln(0/q) = 0.

    ``p`` is a constant target; gradients flow to ``q`` only.
    """
    pd = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=DTYPE)
    q = as_tensor(q)
    if pd.shape != q.shape:
        raise ShapeError(f"kl_divergence: {pd.shape} vs {q.shape}")
    qd = q.data
    if (pd < 0).any():
        raise NormalizationError("kl_divergence: negative entry in p")
    for name, arr in (("p", pd), ("q", qd)):
        if np.abs(arr.sum(axis=-1) - 1.0).max(initial=0.0) > tol:
            raise NormalizationError(f"kl_divergence: {name} does not sum to 1 (tol {tol})")
    support = pd > 0
    if (support & (qd <= 0)).any():
        raise SupportError("kl_divergence: p > 0 where q == 0")
    safe_q = np.where(support, qd, 1.0)
    safe_p = np.where(support, pd, 1.0)
    out = np.where(support, pd * np.log(safe_p / safe_q), 0.0).sum(axis=-1)

    def bw(g):
        g = np.asarray(g)[..., None]
        return (None, g * np.where(support, -pd / safe_q, 0.0))

    return _node(out, (Tensor(pd), q), bw)


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------
def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    s = sum_(x, axis, keepdims)
    return scale(s, s.size / x.size)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx):
    shape = x.shape
    advanced = _is_advanced(idx)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _node(x.data[idx], (x,), bw)


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


KERNELS = (
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "softmax_with_bias",
    "layer_norm",
    "gelu",
    "embedding",
    "cross_entropy",
    "cosine_similarity",
    "kl_divergence",
    "sum",
    "mean",
    "concat",
    "getitem",
    "reshape",
    "transpose",
)
