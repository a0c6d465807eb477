"""Dense float64 tensors with reverse-mode gradients.

Every op builds a node holding its output array, its parents and a closure
mapping the output gradient to per-parent gradient contributions. Calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients into the leaves that requested them.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_DEBUG = False
_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Turn NaN/Inf checking of every op output on or off."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _SliceGrad:
    """Gradient that only touches ``index`` of the parent."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        _run_backward(self, np.asarray(grad, dtype=DTYPE))

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


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


def _run_backward(root: Tensor, seed: np.ndarray) -> None:
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): seed}
    owned: set[int] = set()
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, contrib in zip(node._parents, node._backward(g)):
            if contrib is None or not parent.requires_grad:
                continue
            key = id(parent)
            acc = grads.get(key)
            if isinstance(contrib, _SliceGrad):
                if acc is None:
                    acc = np.zeros(parent.shape, dtype=DTYPE)
                    grads[key] = acc
                    owned.add(key)
                elif key not in owned:
                    acc = acc.copy()
                    grads[key] = acc
                    owned.add(key)
                acc[contrib.index] += contrib.value
            elif acc is None:
                grads[key] = contrib
                owned.discard(key)
            elif key in owned:
                acc += contrib
            else:
                grads[key] = acc + contrib
                owned.add(key)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``mask`` is true, else ``b``; mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb))

    return _make(np.where(mask, a.data, b.data), (a, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. Masked-out entries get exactly zero weight."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DimensionError("softmax row with no unmasked entries")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _make(y, (x,), backward)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind in ("softmax", "softmax-last-axis"):
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(xd @ wd + b.data, (x, w, b), backward)


def addmm(c: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``c + a @ b`` as one node; ``c`` must already have the product's shape."""
    a, b, c = as_tensor(a), as_tensor(b), as_tensor(c)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"addmm shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = c.data + ad @ bd
    if out.shape != c.shape:
        raise DimensionError(f"addmm bias shape {c.shape} does not match {out.shape}")

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return g, ga, gb

    return _make(out, (c, a, b), backward)


# ---------------------------------------------------------------- reductions and reshaping


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    return _make(x.data[index], (x,), lambda g: (_SliceGrad(index, g),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` for a (B, T, ...) tensor; pairs must be distinct."""
    x = as_tensor(x)
    index = (np.asarray(rows), np.asarray(cols))
    return _make(x.data[index], (x,), lambda g: (_SliceGrad(index, g),))


def permute_time(x: Tensor, order: np.ndarray) -> Tensor:
    """Reorder axis 1 per batch row: ``out[b, t] = x[b, order[b, t]]``.

    ``order`` must hold a permutation of ``range(T)`` in every row.
    """
    x = as_tensor(x)
    order = np.asarray(order)
    rows = np.arange(order.shape[0])[:, None]
    inverse = np.empty_like(order)
    inverse[rows, order] = np.arange(order.shape[1])[None, :]
    return _make(x.data[rows, order], (x,), lambda g: (g[rows, inverse],))


def embedding_mean(table: Tensor, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of ``table`` rows over the last axis of ``ids`` where ``mask`` is set.

    Rows with no unmasked id come out as zero vectors.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=DTYPE)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"code id out of range for vocabulary of size {n_rows}")
    count = mask.sum(axis=-1, keepdims=True)
    coef = mask / np.maximum(count, 1.0)
    out = np.einsum("...c,...cd->...d", coef, table.data[ids])

    def backward(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        contrib = coef[..., None] * g[..., None, :]
        np.add.at(gt, ids.reshape(-1), contrib.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), backward)


# ---------------------------------------------------------------- losses


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable for large |logit|."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise DimensionError(f"labels {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    z = logits.data
    u = -(2.0 * y - 1.0) * z
    loss = np.mean(np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u))))
    n = max(z.size, 1)

    def backward(g):
        return (g * (expit(z) - y) / n,)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- gradient checking


def _perturbation_targets(point) -> list[Tensor]:
    if isinstance(point, Tensor):
        return [point]
    if isinstance(point, Mapping):
        return list(point.values())
    return list(point)


def finite_diff_check(f: Callable, point, h: float = 1e-4, analytic=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f(point)`` must return a scalar Tensor. ``point`` is a Tensor, a mapping of
    name to Tensor, or a sequence of Tensors; all of them are perturbed in place
    and restored. ``analytic`` overrides the backward-pass gradient (one array per
    tensor) which is how a deliberately wrong gradient gets checked.
    """
    targets = _perturbation_targets(point)
    if analytic is None:
        saved = [t.requires_grad for t in targets]
        for t in targets:
            t.requires_grad = True
            t.grad = None
        f(point).backward()
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in targets]
        for t, flag in zip(targets, saved):
            t.requires_grad = flag
            t.grad = None
    elif isinstance(analytic, np.ndarray):
        analytic = [analytic]

    worst = 0.0
    with no_grad():
        for t, a in zip(targets, analytic):
            flat = t.data.reshape(-1)
            a = np.asarray(a).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(point).data)
                flat[i] = orig - h
                fm = float(f(point).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                denom = max(abs(a[i]), abs(num), 1e-8)
                worst = max(worst, abs(a[i] - num) / denom)
    return worst


# ---------------------------------------------------------------- randomness


class Rng:
    """Root seed from which independent, named numpy generators are derived.

    ``Rng(7).stream("init", "gru.W_z")`` always yields the same generator, and
    streams under different keys do not overlap.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)

    @staticmethod
    def _key(part) -> int:
        if isinstance(part, (int, np.integer)):
            return int(part)
        return zlib.crc32(str(part).encode("utf-8"))

    def stream(self, *keys) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(self._key(k) for k in keys))
        return np.random.Generator(np.random.PCG64(seq))

    def child_seed(self, *keys) -> int:
        return int(self.stream(*keys).integers(0, 2**63 - 1))

    def __repr__(self) -> str:
        return f"Rng({self.seed})"


def parameters_checksum(params: Mapping[str, Tensor] | Iterable[tuple[str, np.ndarray]]) -> str:
    import hashlib

    items = params.items() if isinstance(params, Mapping) else params
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=DTYPE).tobytes())
    return h.hexdigest()
