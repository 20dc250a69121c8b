"""Dense tensors with reverse-mode automatic differentiation.

Eager numpy forward; every op that touches a grad-requiring tensor records
a backward closure, and ``backward()`` replays the closures in reverse
topological order. float32 is the training default, float64 exists for the
finite-difference check suites (32-bit steps are too coarse for them).

Conventions:
  - all tensors are float32 or float64; mixed-dtype ops are an error
  - gradients accumulate across backward() calls until zero_grad()
  - graph construction is single-threaded
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Reverse-mode pass seeding d(self)/d(self) = 1.

        Populates .grad of every grad-requiring tensor reachable from this
        scalar; repeated calls accumulate.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not on the tape (requires_grad is False)")
        order = _topo_order(self)
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def sum(self):
        return sum_all(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data, parents, backward_fn):
    """Wrap an op result; records the closure only when a parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _check_dtypes(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"mixed dtypes: {dt} vs {t.data.dtype}")
    return dt


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * a.data.dtype.type(s), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2D or batched with identical leading dims."""
    _check_dtypes(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup table[indices]; backward scatter-adds (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"gather index out of range for table with {table.shape[0]} rows")

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accumulate(table, buf)

    return _make(table.data[idx], (table,), backward)


def scatter_rows(src: Tensor, indices, n_rows: int) -> Tensor:
    """Place src rows at `indices` of an otherwise-zero [n_rows, d] output.

    Indices must be unique (each output row written at most once).
    """
    idx = np.asarray(indices, dtype=np.int64)
    out_data = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    out_data[idx] = src.data

    def backward(g):
        _accumulate(src, g[idx])

    return _make(out_data, (src,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def sigmoid_np(x):
    # exp(-|x|) never overflows; select the matching stable branch
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_np(a.data)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def silu_np(x):
    return x * sigmoid_np(x)


def silu(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    y = a.data * s

    def backward(g):
        _accumulate(a, g * (s + a.data * s * (1.0 - s)))

    return _make(y, (a,), backward)


def layer_norm_np(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return gamma * (xc * inv) + beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    _check_dtypes(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), backward)


def softmax_np(x, mask=None):
    """Stable softmax over the last axis; optional boolean keep-mask.

    A mask row with no True entry (or an all--inf input row) is a
    precondition violation and raises.
    """
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        if not np.isfinite(m).all():
            raise ValueError("fully masked row")
        e = np.exp(x - m)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("fully masked row")
    shifted = np.where(mask, x, -np.inf)
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m)  # exactly 0.0 at masked entries
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. `mask` (bool, broadcastable) keeps entries;
    dropped entries get exactly zero probability and zero gradient."""
    p = softmax_np(x.data, mask)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(x, p * (g - dot))

    return _make(p, (x,), backward)


def rope_rotate(x: Tensor, cos, sin) -> Tensor:
    """Rotate adjacent channel pairs (2j, 2j+1) of the last axis.

    cos/sin have shape [n, last/2] and broadcast over leading axes of x.
    Per-pair norms are preserved (plane rotations).
    """
    if x.shape[-1] % 2 != 0:
        raise ValueError("rope_rotate needs an even last axis")
    c = cos.reshape((1,) * (x.ndim - 2) + cos.shape)
    s = sin.reshape((1,) * (x.ndim - 2) + sin.shape)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * c - xo * s
    out_data[..., 1::2] = xe * s + xo * c

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = -ge * s + go * c
        _accumulate(x, gx)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions / loss
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full_like(a.data, g))

    return _make(a.data.sum(), (a,), backward)


def cross_entropy_masked(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over masked-in rows of [T, V] logits.

    Rows with loss_mask False contribute exactly zero loss and gradient.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy_masked expects [T, V] logits, got {logits.shape}")
    if tgt.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise ValueError("targets/loss_mask length must match logits rows")
    if not mask.any():
        raise ValueError("no text targets")
    picked_t = tgt[mask]
    vocab = logits.shape[1]
    if picked_t.min() < 0 or picked_t.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")

    rows = logits.data[mask]
    m = rows.max(axis=1, keepdims=True)
    z = rows - m
    ez = np.exp(z)
    denom = ez.sum(axis=1)
    k = rows.shape[0]
    losses = np.log(denom) - z[np.arange(k), picked_t]
    out_data = losses.mean()

    def backward(g):
        p = ez / denom[:, None]
        p[np.arange(k), picked_t] -= 1.0
        full = np.zeros_like(logits.data)
        full[mask] = p * (g / k)
        _accumulate(logits, full)

    return _make(out_data, (logits,), backward)
