"""Dense tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor`.  When any input requires a
gradient (and recording is enabled) the result remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks that graph in reverse topological order.

Shapes are explicit: elementwise ops require identical shapes, the only
broadcast is adding a 1-D bias along the last axis.

Summation order: every reduction is a numpy reduction over a C-contiguous
array (pairwise summation along the reduced axis), and gradients reaching the
same leaf are added in reverse topological order, which is fixed by the order
ops were recorded.  Same inputs on the same platform give bit-identical
results.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_NEG_INF = -np.inf


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def is_recording() -> bool:
    return _recording


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# core algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight) or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def _back(g):
        ga = np.matmul(g, _swap_last(bd)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(_swap_last(ad), g)
        return ga, gb

    return _node(out, (a, b), _back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        n = b.shape[0]
        return _node(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "bias_add")
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        if a.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``index(h, (slice(None), 0))``."""
    out = a.data[key]
    shape, dtype = a.shape, a.data.dtype

    def _back(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] += g
        return (full,)

    return _node(np.array(out), (a,), _back, "index")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _node(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(total(a), 1.0 / n)


def weighted_sum(a: Tensor, weights) -> Tensor:
    """``sum_i a[i] * w[i]`` with constant weights (no gradient to ``w``)."""
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {a.shape} vs weights {w.shape}")
    return _node(np.asarray((a.data * w).sum()), (a,), lambda g: (g * w,), "weighted_sum")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# normalisation and probability ops


def _softmax_np(x: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, _NEG_INF)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s == 0.0, 1.0, s)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax.  ``mask`` (True = keep) is a constant boolean
    array broadcastable to ``x``; masked entries get probability exactly 0."""
    y = _softmax_np(x.data, axis, mask)

    def _back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), _back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    shifted = d - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def _back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), _back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def _back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _node(out, (x, gain, bias), _back, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab}): {ids.min()}..{ids.max()}")

    def _back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, dim))
        return (gt,)

    return _node(table.data[ids], (table,), _back, "embedding")


def sequence_nll(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Per-sequence negative log-likelihood.

    ``logits`` is ``(..., T, V)``, ``targets`` integer ``(..., T)``,
    ``pad_mask`` boolean ``(..., T)`` with True marking padding steps, which
    contribute nothing.  Returns a tensor of shape ``logits.shape[:-2]``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = int(targets.max() if targets.max() >= v else targets.min())
        raise IndexError(f"target id {bad} outside vocabulary of size {v}")
    keep = np.ones(targets.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    if keep.shape != targets.shape:
        raise ShapeError(f"pad_mask {keep.shape} does not match targets {targets.shape}")

    d = logits.data
    m = d.max(axis=-1, keepdims=True)
    shifted = d - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    step_nll = np.where(keep, -picked, 0.0)
    out = step_nll.sum(axis=-1)

    def _back(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        scale_ = (np.asarray(g)[..., None] * keep)[..., None]
        return (p * scale_,)

    node = _node(out, (logits,), _back, "sequence_nll")
    return node


def cross_entropy(logits: Tensor, targets, pad_mask=None) -> tuple[Tensor, np.ndarray]:
    """Total and per-step NLL of a ``T x V`` logit matrix."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects T x V logits, got {logits.shape}")
    if logits.shape[-1] < 2:
        raise ShapeError("cross_entropy needs at least two classes")
    nll = sequence_nll(logits, targets, pad_mask)
    logp = log_softmax(Tensor(logits.data)).data
    t = np.asarray(targets, dtype=np.int64)
    keep = np.ones(t.shape, bool) if pad_mask is None else ~np.asarray(pad_mask, bool)
    per_step = np.where(keep, -logp[np.arange(len(t)), t], 0.0)
    return nll, per_step


def bce_with_logits(logits: Tensor, labels, mask) -> Tensor:
    """Mean binary cross-entropy over positions where ``mask`` is True."""
    y = np.asarray(labels, dtype=logits.data.dtype)
    keep = np.asarray(mask, dtype=bool)
    if y.shape != logits.shape or keep.shape != logits.shape:
        raise ShapeError(f"bce shapes differ: logits {logits.shape}, labels {y.shape}, mask {keep.shape}")
    count = max(int(keep.sum()), 1)
    x = logits.data
    # softplus(x) - y*x, stable for large |x|
    per = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) - y * x
    out = np.asarray(np.where(keep, per, 0.0).sum() / count)

    def _back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * np.where(keep, sig - y, 0.0) / count,)

    return _node(out, (logits,), _back, "bce")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient.  ``loss`` must be a single-element tensor produced by
    a recorded forward pass."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise GraphError("backward called before any recorded forward pass for this tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
