"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays (float32 by default, float64 for
gradient checking). The computation graph is a single-use tape: each
forward pass records parent links and backward closures, and calling
``backward()`` consumes the graph. All randomness comes in through
explicit ``numpy.random.Generator`` arguments.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class GraphConsumedError(RuntimeError):
    """Raised when backward() walks into an already-consumed graph."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is not None and data.dtype != dtype:
            return data.astype(dtype)
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumed = False

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        The loss must be scalar; the recorded graph is single-use.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self._consumed:
            raise GraphConsumedError("graph consumed")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._consumed:
                raise GraphConsumedError("graph consumed")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                # leaves stay reusable; only recorded nodes are single-use
                node._consumed = True
                node._backward_fn(node.grad)
                node._backward_fn = None
                node._parents = ()

    # -- operator sugar ---------------------------------------------------

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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward_fn)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through only inside the bounds."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data > lo) & (a.data < hi)))

    return _make(data, (a,), backward_fn)


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward_fn)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        denom = a.data.size
    elif isinstance(axis, tuple):
        denom = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        denom = a.data.shape[axis]

    def backward_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / denom, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg / denom, a.shape))

    return _make(data, (a,), backward_fn)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.shape
    data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _make(data, (a,), backward_fn)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward_fn)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    data = a.data.swapaxes(ax1, ax2)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.swapaxes(ax1, ax2))

    return _make(data, (a,), backward_fn)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    data = a.data[idx]

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(data, (a,), backward_fn)


def take_rows(table, idx: np.ndarray) -> Tensor:
    """Embedding-style lookup: rows of a [N, D] table by integer index."""
    table = _wrap(table)
    idx = np.asarray(idx)
    data = table.data[idx]

    def backward_fn(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            table._accumulate(full)

    return _make(data, (table,), backward_fn)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(ts, parts):
            if t.requires_grad:
                t._accumulate(p)

    return _make(data, ts, backward_fn)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def backward_fn(g):
        parts = np.split(g, len(ts), axis=axis)
        for t, p in zip(ts, parts):
            if t.requires_grad:
                t._accumulate(p.squeeze(axis))

    return _make(data, ts, backward_fn)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight of shape [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- fused neural-net ops -----------------------------------------------------


def softmax(a, axis: int = -1, check_finite: bool = True) -> Tensor:
    """Numerically stable softmax (max-subtraction).

    ``check_finite=False`` is for internal callers that mask with -inf on
    purpose (causal attention); the public contract rejects non-finite input.
    """
    a = _wrap(a)
    if check_finite and not np.isfinite(a.data).all():
        raise ValueError("non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), backward_fn)


def layer_norm(x, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token layer normalization over the last axis, then scale/shift."""
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    data = xhat * weight.data + bias.data
    n = x.data.shape[-1]

    def backward_fn(g):
        gw = g * weight.data
        if x.requires_grad:
            m1 = gw.mean(axis=-1, keepdims=True)
            m2 = (gw * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gw - m1 - xhat * m2))
        if weight.requires_grad:
            weight._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))

    return _make(data, (x, weight, bias), backward_fn)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: train-mode mask with keep-prob rescale, identity in eval."""
    x = _wrap(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / np.asarray(keep, dtype=x.data.dtype)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward_fn)


def gaussian_sample(mu: Tensor, log_sigma: Tensor, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Reparameterized Gaussian draw: mu + exp(log_sigma) * eps, eps recorded."""
    eps = rng.standard_normal(mu.shape).astype(mu.data.dtype)
    z = add(mu, mul(exp(log_sigma), Tensor(eps)))
    return z, eps


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of [N, C] logits against integer labels.

    With a 0/1 mask, positions with mask 0 are excluded from the mean.
    """
    logits = _wrap(logits)
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects [N, C] logits")
    labels = np.asarray(labels).reshape(-1)
    n, _ = logits.data.shape
    if labels.shape[0] != n:
        raise ValueError("labels length does not match logits")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=-1, keepdims=True))
    per = -logp[np.arange(n), labels]
    if mask is None:
        denom = float(n)
        data = np.asarray(per.sum() / denom, dtype=logits.data.dtype)
    else:
        mask = np.asarray(mask, dtype=logits.data.dtype).reshape(-1)
        denom = float(mask.sum())
        if denom == 0:
            raise ValueError("cross_entropy mask is all-zero")
        data = np.asarray((per * mask).sum() / denom, dtype=logits.data.dtype)

    def backward_fn(g):
        if not logits.requires_grad:
            return
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        if mask is not None:
            d *= mask[:, None]
        logits._accumulate(d * (g / denom))

    return _make(data, (logits,), backward_fn)


def mse_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all (optionally masked) entries."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    diff = sub(pred, Tensor(target))
    sq = mul(diff, diff)
    if mask is None:
        return tmean(sq)
    mask = np.asarray(mask, dtype=pred.data.dtype)
    denom = float(mask.sum()) * (pred.data.size / mask.size)
    return div(tsum(mul(sq, Tensor(mask))), Tensor(np.asarray(denom, dtype=pred.data.dtype)))
