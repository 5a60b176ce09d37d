"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every op builds its output eagerly with
numpy and records a closure that maps the output gradient back onto its
inputs.  Broadcasting is restricted to a leading batch prefix (a bias of
shape ``(d,)`` may be added to ``(B, T, d)``); any other shape mismatch is
rejected when the op is built.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = _op

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _op=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: shapes {a} and {b} differ beyond a leading batch prefix")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), bw, "div")


def scale_rows(x, w) -> Tensor:
    """Multiply each trailing-axis row of ``x`` (``(..., C)``) by ``w`` (``(...)``)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.shape != x.shape[:-1]:
        raise ValueError(f"scale_rows: weights {w.shape} do not match rows {x.shape[:-1]}")
    xd, wd = x.data, w.data[..., None]
    return _node(xd * wd, (x, w), lambda g: (g * wd, (g * xd).sum(axis=-1)), "scale_rows")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tabs(x) -> Tensor:
    """|x| with subgradient 0 at the kink."""
    x = as_tensor(x)
    s = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(x.data[index], (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    axis = axis % x.ndim

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gm = np.moveaxis(gx, axis, 0)
        src = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(gm, idx, src)
        return (gx,)

    return _node(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def cumsum(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(x.data, axis=axis), (x,), bw, "cumsum")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ValueError("matmul: batched right operand needs a batched left operand")
    ad, bd = a.data, b.data
    # a shared 2-D right operand folds the batch into rows: one large GEMM
    # instead of many small ones
    flat = bd.ndim == 2 and ad.ndim > 2

    def bw(g):
        if flat:
            k, m = bd.shape
            g2 = g.reshape(-1, m)
            return (g2 @ bd.T).reshape(ad.shape), ad.reshape(-1, k).T @ g2
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[1]) if flat else ad @ bd
    return _node(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (True = keep) zeroes excluded entries.

    Rows with every entry masked come out as all zeros instead of NaN.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _node(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: affine params must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _node(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def embedding(weight, ids) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.intp)
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"embedding: token id outside [0, {v})")
    shape = weight.shape

    def bw(g):
        gw = np.zeros(shape, dtype=DTYPE)
        np.add.at(gw, ids, g)
        return (gw,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def segment_sum(x, seg_ids, n_segments: int) -> Tensor:
    """Sum rows of ``x`` (``(..., T, C)``) into ``n_segments`` buckets.

    ``seg_ids`` has shape ``(..., T)``; ids outside ``[0, n_segments)`` drop
    the row.  Empty buckets are zero rows.
    """
    x = as_tensor(x)
    seg = np.asarray(seg_ids)
    if seg.shape != x.shape[:-1]:
        raise ValueError(f"segment_sum: ids {seg.shape} do not match rows {x.shape[:-1]}")
    assign = (seg[..., None, :] == np.arange(n_segments)[:, None]).astype(DTYPE)
    return _node(assign @ x.data, (x,), lambda g: (np.swapaxes(assign, -1, -2) @ g,), "segment_sum")


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    m = np.ones(targets.shape, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    live = m > 0
    if np.any(live & ((targets < 0) | (targets >= v))):
        raise ValueError(f"cross_entropy: target id outside [0, {v})")
    safe = np.where(live, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    n = max(m.sum(), 1.0)
    loss = -(picked * m).sum() / n

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None],
                          np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (m / n)[..., None],)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# graph and backward
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


class Graph:
    """Topologically ordered record of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _toposort(output)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes if n._parents]


def backward(loss: Tensor, grad=None, graph: Graph | None = None) -> None:
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=DTYPE)
    if not loss.requires_grad:
        return
    nodes = (graph or Graph(loss)).nodes
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def forward_backward(graph: Graph, loss_node: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate a scalar loss; return ``{leaf: d loss / d leaf}``."""
    if loss_node.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss_node.shape}")
    leaves = graph.leaves()
    for leaf in leaves:
        leaf.grad = None
    backward(loss_node, graph=graph)
    return {leaf: (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)) for leaf in leaves}


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                            coords: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``coords`` restricts the comparison to a subset of flat indices.  A
    non-finite value anywhere returns ``inf`` so callers see a failed check.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1 or not np.isfinite(out.data).all():
        return math.inf
    backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros(x.shape)).ravel().copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in (range(flat.size) if coords is None else coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            worst = max(worst, abs(numeric - analytic[i]) / (abs(analytic[i]) + 1e-8))
    return worst
