"""Reverse-mode differentiation over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
propagating the output gradient back to them.  ``backward`` walks the graph in
reverse topological order.  Graph nodes are only recorded when at least one
input requires a gradient, so frozen parameter groups and detached features
cost nothing on the backward pass.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if grad is None:
        grad = np.ones_like(root.data)
    # interior gradients live in a side table; leaves accumulate in .grad
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _accum(node, g)
            continue
        node._backward(g)
        for p, pg in zip(node._parents, node._pending):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._pending = None


class _Node(Tensor):
    # interior node; the backward closure parks parent gradients in _pending
    __slots__ = ("_pending",)


def _node(data: np.ndarray, parents: Sequence[Tensor], back: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = _Node(data)
    out._pending = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def fn(g, _out=out):
            _out._pending = back(g)

        out._backward = fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def add_all(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[0]

    def back(g):
        full = np.zeros((n,) + a.shape[1:], dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in float64 and returned in ``a``'s dtype."""
    if a.dtype == np.float64 and b.dtype == np.float64:
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype, copy=False)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with x (N, in), w (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = _mm(x.data, w.data.T)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = _mm(g, w.data) if x.requires_grad else None
        gw = _mm(g.T, x.data) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _node(out, parents, back)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation; x (N, C, H, W), w (O, C, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = _mm(cols, wmat.T)
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = _mm(gm.T, cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = _mm(gm, wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            span_h = (ho - 1) * stride + 1
            span_w = (wo - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _node(out, parents, back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch norm over axis 1 of a (N, C) or (N, C, H, W) input.

    Train mode normalizes with biased batch statistics and (if ``update_stats``)
    moves the running buffers in place with the unbiased variance.  Statistics
    and the normalization itself are computed in float64 whatever the input
    dtype: conv outputs often have a mean large against their spread and
    float32 centering would cancel most of the significant bits.
    """
    if x.data.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} incompatible with {gamma.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    m = x.data.size // x.shape[1]
    if training:
        if m < 2:
            raise ShapeError(f"batch_norm: train mode needs more than one value per channel, got {x.shape}")
        xd = x.data.astype(np.float64, copy=False)
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        xd = x.data.astype(np.float64, copy=False)
        mean = running_mean.astype(np.float64, copy=False)
        var = running_var.astype(np.float64, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    out = out.astype(x.data.dtype, copy=False)

    def back(g):
        g = g.astype(np.float64, copy=False)
        gg = (g * xhat).sum(axis=axes).astype(gamma.data.dtype) if gamma.requires_grad else None
        gb = g.sum(axis=axes).astype(beta.data.dtype) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = (
                    inv.reshape(bshape)
                    / m
                    * (
                        m * gxhat
                        - gxhat.sum(axis=axes).reshape(bshape)
                        - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                    )
                )
            else:
                gx = gxhat * inv.reshape(bshape)
            gx = gx.astype(x.data.dtype, copy=False)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    return _node(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max; ties go to the lowest flat index."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_max_pool expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)

    def back(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _node(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0], (x,), back)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs targets {targets.shape}")
    width = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= width):
        raise IndexError(f"target index out of range [0, {width}): {targets.tolist()}")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


def uniform_cross_entropy(logits: Tensor) -> Tensor:
    """Mean over the batch of -(1/K) sum_k log softmax(logits)[k]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross entropy: logits must be 2-D, got {logits.shape}")
    n, k = logits.shape
    logp = log_softmax(logits.data)
    loss = -logp.mean(axis=1).mean()

    def back(g):
        return ((np.exp(logp) - 1.0 / k) * (g / n),)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)
