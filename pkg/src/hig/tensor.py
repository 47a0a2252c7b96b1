"""Dense numeric arrays with reverse-mode gradient accumulation.

DiffArray wraps a numpy array and records the operations applied to it so
that backward() can accumulate gradients into every input that asked for
them. 64-bit floats are the default; 32-bit arrays work throughout and keep
their dtype (internal scaling constants are applied as weak python scalars).

Concurrency: all operations are pure functions of their inputs; the only
mutable state is the .grad accumulator, so a single recorded graph must not
be driven backward from two threads at once. Independent graphs are safe to
evaluate concurrently.
"""

from __future__ import annotations

import numpy as np

# ----------------------------------------------------------------------------
# Core array type.


class DiffArray:
    """Multi-dimensional float array supporting reverse-mode differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "_parents")

    def __init__(self, values, requires_grad: bool = False):
        v = np.asarray(values)
        if v.dtype not in (np.float64, np.float32):
            v = v.astype(np.float64)
        self.values = v
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()  # tuple of (DiffArray, vjp) pairs

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.values.shape}{flag})"

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "DiffArray":
        return DiffArray(self.values)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of self into every reachable requires_grad array.

        `seed` defaults to ones; pass an explicit array for non-scalar outputs
        when a different weighting is wanted.
        """
        if not self._parents and not self.requires_grad:
            raise RuntimeError(
                "gradients requested before a forward pass was recorded"
            )
        if seed is None:
            seed = np.ones_like(self.values)
        else:
            seed = np.asarray(seed, dtype=self.values.dtype)
            if seed.shape != self.values.shape:
                raise ValueError("seed gradient shape mismatch")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node.requires_grad:
                # interior node explicitly marked as a parameter
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar -------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def asdiff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _toposort(root: DiffArray) -> list[DiffArray]:
    """Reverse topological order, deterministic in construction order."""
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _make(values: np.ndarray, parents) -> DiffArray:
    """Wrap op result; drop the tape when no parent needs gradients."""
    live = [(p, f) for p, f in parents if p.requires_grad or p._parents]
    out = DiffArray(values)
    if live:
        out._parents = tuple(live)
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# Elementwise arithmetic (broadcasting).


def add(a, b) -> DiffArray:
    # python scalars stay weak so float32 graphs are not upcast
    if isinstance(b, (int, float)):
        a = asdiff(a)
        return _make(a.values + b, [(a, lambda g: g)])
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = asdiff(a), asdiff(b)
    return _make(
        a.values + b.values,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def sub(a, b) -> DiffArray:
    if isinstance(b, (int, float)):
        a = asdiff(a)
        return _make(a.values - b, [(a, lambda g: g)])
    if isinstance(a, (int, float)):
        b = asdiff(b)
        return _make(a - b.values, [(b, lambda g: -g)])
    a, b = asdiff(a), asdiff(b)
    return _make(
        a.values - b.values,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
    )


def mul(a, b) -> DiffArray:
    if isinstance(b, (int, float)):
        a = asdiff(a)
        return _make(a.values * b, [(a, lambda g: g * b)])
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = asdiff(a), asdiff(b)
    return _make(
        a.values * b.values,
        [
            (a, lambda g: _unbroadcast(g * b.values, a.shape)),
            (b, lambda g: _unbroadcast(g * a.values, b.shape)),
        ],
    )


def div(a, b) -> DiffArray:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = asdiff(a), asdiff(b)
    inv = 1.0 / b.values
    return _make(
        a.values * inv,
        [
            (a, lambda g: _unbroadcast(g * inv, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.values * inv * inv, b.shape)),
        ],
    )


def power(a, p: float) -> DiffArray:
    a = asdiff(a)
    p = float(p)
    out = a.values**p
    return _make(out, [(a, lambda g: g * (p * a.values ** (p - 1.0)))])


def exp(a) -> DiffArray:
    a = asdiff(a)
    out = np.exp(a.values)
    return _make(out, [(a, lambda g: g * out)])


def log(a) -> DiffArray:
    a = asdiff(a)
    return _make(np.log(a.values), [(a, lambda g: g / a.values)])


def sqrt(a) -> DiffArray:
    a = asdiff(a)
    out = np.sqrt(a.values)
    return _make(out, [(a, lambda g: g * (0.5 / out))])


def sigmoid(a) -> DiffArray:
    a = asdiff(a)
    out = _sigmoid_np(a.values)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def silu(a) -> DiffArray:
    """x * sigmoid(x), the raw (non-rescaled) form."""
    a = asdiff(a)
    s = _sigmoid_np(a.values)
    out = a.values * s
    return _make(out, [(a, lambda g: g * (s + out * (1.0 - s)))])


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # evaluate from the side that keeps exp() bounded
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def where_mask(mask: np.ndarray, a, b) -> DiffArray:
    """Select a where mask else b; mask is a constant boolean/float array."""
    a, b = asdiff(a), asdiff(b)
    m = np.asarray(mask)
    out = np.where(m, a.values, b.values)
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(np.where(m, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(m, 0.0, g), b.shape)),
        ],
    )


# ----------------------------------------------------------------------------
# Reductions and shape manipulation.


def sum_(a, axis=None, keepdims=False) -> DiffArray:
    a = asdiff(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, a.shape).copy()

    return _make(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False) -> DiffArray:
    a = asdiff(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else _axis_size(a.shape, axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / denom, a.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g / denom, a.shape).copy()

    return _make(out, [(a, vjp)])


def _axis_size(shape, axis) -> int:
    ax = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for i in ax:
        n *= shape[i]
    return n


def reshape(a, shape) -> DiffArray:
    a = asdiff(a)
    return _make(
        a.values.reshape(shape), [(a, lambda g: g.reshape(a.shape))]
    )


def transpose(a, axes=None) -> DiffArray:
    a = asdiff(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(
        a.values.transpose(axes),
        [(a, lambda g: g.transpose(inv) if inv is not None else g.transpose())],
    )


def concat(parts, axis: int = -1) -> DiffArray:
    parts = [asdiff(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _make(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


# ----------------------------------------------------------------------------
# Linear algebra and gather/scatter.


def matmul(a, b) -> DiffArray:
    a, b = asdiff(a), asdiff(b)

    def vjp_a(g):
        pg = g @ b.values.swapaxes(-1, -2)
        return pg if pg.shape == a.shape else _unbroadcast(pg, a.shape)

    def vjp_b(g):
        pg = a.values.swapaxes(-1, -2) @ g
        return pg if pg.shape == b.shape else _unbroadcast(pg, b.shape)

    return _make(a.values @ b.values, [(a, vjp_a), (b, vjp_b)])


def take_rows(a, idx: np.ndarray) -> DiffArray:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    a = asdiff(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return out

    return _make(a.values[idx], [(a, vjp)])


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> DiffArray:
    """Sum rows of `a` into `num_segments` buckets; ids must be sorted ascending.

    Summation runs in row order within each bucket, so results are
    deterministic for a fixed row ordering.
    """
    a = asdiff(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    out_shape = (num_segments,) + a.shape[1:]
    out = np.zeros(out_shape, dtype=a.dtype)
    if ids.size:
        uniq, starts = np.unique(ids, return_index=True)
        sums = np.add.reduceat(a.values, starts, axis=0)
        out[uniq] = sums
    return _make(out, [(a, lambda g: g[ids])])


def segment_sum_compensated(a, segment_ids: np.ndarray, num_segments: int) -> DiffArray:
    """Kahan-compensated segment sum; order-independent to the last bit for
    modest bucket sizes. Slower; used when bit-exact aggregation is required."""
    a = asdiff(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    out_shape = (num_segments,) + a.shape[1:]
    acc = np.zeros(out_shape, dtype=np.float64)
    comp = np.zeros(out_shape, dtype=np.float64)
    vals = a.values.astype(np.float64, copy=False)
    for row, seg in zip(vals, ids):
        y = row - comp[seg]
        t = acc[seg] + y
        comp[seg] = (t - acc[seg]) - y
        acc[seg] = t
    return _make(acc.astype(a.dtype, copy=False), [(a, lambda g: g[ids])])


# ----------------------------------------------------------------------------
# Image-shaped ops. Activations are laid out (B, H, W, C) so the feature axis
# is contiguous for the per-tap matmuls.


def conv2d(x, w, pad: int = 1) -> DiffArray:
    """Same-size 2-D cross-correlation; x is (B,H,W,Cin), w is (kh,kw,Cin,Cout)."""
    x, w = asdiff(x), asdiff(w)
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    xp = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((B, H, W, Cout), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            win = xp[:, ki : ki + H, kj : kj + W, :].reshape(-1, Cin)
            out += (win @ w.values[ki, kj]).reshape(B, H, W, Cout)

    def vjp_x(g):
        gp = np.zeros_like(xp)
        gm = g.reshape(-1, Cout)
        for ki in range(kh):
            for kj in range(kw):
                gp[:, ki : ki + H, kj : kj + W, :] += (
                    gm @ w.values[ki, kj].T
                ).reshape(B, H, W, Cin)
        if pad:
            return gp[:, pad:-pad, pad:-pad, :]
        return gp

    def vjp_w(g):
        gw = np.zeros_like(w.values)
        gm = g.reshape(-1, Cout)
        for ki in range(kh):
            for kj in range(kw):
                win = xp[:, ki : ki + H, kj : kj + W, :].reshape(-1, Cin)
                gw[ki, kj] = win.T @ gm
        return gw

    return _make(out, [(x, vjp_x), (w, vjp_w)])


def avg_pool2(x) -> DiffArray:
    """2x2 mean pooling on (B,H,W,C)."""
    x = asdiff(x)
    B, H, W, C = x.shape
    v = x.values.reshape(B, H // 2, 2, W // 2, 2, C)
    out = v.mean(axis=(2, 4))

    def vjp(g):
        g = g[:, :, None, :, None, :] / 4.0
        return np.broadcast_to(g, (B, H // 2, 2, W // 2, 2, C)).reshape(
            B, H, W, C
        ).copy()

    return _make(out, [(x, vjp)])


def upsample2(x) -> DiffArray:
    """2x nearest-neighbour upsampling on (B,H,W,C)."""
    x = asdiff(x)
    B, H, W, C = x.shape
    out = np.broadcast_to(
        x.values[:, :, None, :, None, :], (B, H, 2, W, 2, C)
    ).reshape(B, 2 * H, 2 * W, C).copy()

    def vjp(g):
        return g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4))

    return _make(out, [(x, vjp)])
