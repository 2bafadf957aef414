"""A small reverse-mode differentiation engine on top of numpy.

Each primitive computes its forward value eagerly and, if any input needs a
gradient, records a closure mapping the upstream gradient to input gradients.
``backward`` walks the recorded graph (the tape) once in reverse topological
order. Shapes are never broadcast implicitly; ops that combine different
shapes say so in their name (``add_bias``, ``masked_add``, ...).
"""
from __future__ import annotations

import builtins
import math
from typing import Callable, Sequence

import numpy as np

from .errors import GradientContractError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# row-softmax treats rows whose maximum is at or below this fraction of the
# dtype's most negative value as fully masked
_MASK_FRACTION = 1e-6


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar for the strict same-shape ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other) if self.ndim == 2 and other.ndim == 2 else bmm(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _check_same(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise GradientContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"adjoint produced {pg.shape} for input of shape {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _result(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul ``(..., m, k) @ (..., k, n)`` with identical leading dims."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _result(A @ B, (a, b),
                   lambda g: (g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g))


def node_matmul(m: Tensor, x: Tensor) -> Tensor:
    """``(o, i) @ (..., i, d) -> (..., o, d)``: one matrix applied to every batch item."""
    if m.ndim != 2 or x.ndim < 2 or m.shape[1] != x.shape[-2]:
        raise ShapeError(f"node_matmul: cannot apply {m.shape} to {x.shape}")
    M, X = m.data, x.data

    def fn(g):
        gm = np.swapaxes(g, 0, -2).reshape(M.shape[0], -1) @ np.swapaxes(X, 0, -2).reshape(M.shape[1], -1).T
        return gm, M.T @ g

    return _result(M @ X, (m, x), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` applied over the last axis of an arbitrary-rank ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, lead + (w.shape[1],))


def _einsum_parse(spec: str):
    ins, out = spec.replace(" ", "").split("->")
    xs, ys = ins.split(",")
    return xs, ys, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand contraction. Every operand index must appear in the output or the other operand."""
    xs, ys, zs = _einsum_parse(spec)
    for own, other in ((xs, ys), (ys, xs)):
        if len(set(own)) != len(own) or any(c not in zs and c not in other for c in own):
            raise ShapeError(f"einsum: unsupported subscripts {spec!r}")
    dims: dict[str, int] = {}
    for sub, t in ((xs, a), (ys, b)):
        if len(sub) != t.ndim:
            raise ShapeError(f"einsum {spec!r}: operand rank {t.ndim} != {len(sub)}")
        for c, n in zip(sub, t.shape):
            if dims.setdefault(c, n) != n:
                raise ShapeError(f"einsum {spec!r}: index {c!r} has sizes {dims[c]} and {n}")
    A, B = a.data, b.data
    out = np.einsum(f"{xs},{ys}->{zs}", A, B, optimize=True)

    def fn(g):
        return (np.einsum(f"{zs},{ys}->{xs}", g, B, optimize=True),
                np.einsum(f"{zs},{xs}->{ys}", g, A, optimize=True))

    return _result(out, (a, b), fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("subtract", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("multiply", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def masked_add(x: Tensor, mask) -> Tensor:
    """Add a (differentiable or constant) l x l matrix to the trailing two axes of ``x``."""
    m = as_tensor(mask, dtype=x.dtype)
    if m.shape != x.shape[-2:]:
        raise ShapeError(f"masked_add: mask {m.shape} does not match trailing axes of {x.shape}")
    axes = tuple(range(x.ndim - 2))
    return _result(x.data + m.data, (x, m), lambda g: (g, g.sum(axis=axes)))


def masked_add_stack(x: Tensor, masks: np.ndarray) -> Tensor:
    """``(..., l, l) + (M, l, l) -> (..., M, l, l)``: one copy of ``x`` per constant mask."""
    masks = np.asarray(masks, dtype=x.dtype)
    if masks.ndim != 3 or masks.shape[1:] != x.shape[-2:]:
        raise ShapeError(f"masked_add_stack: masks {masks.shape} incompatible with {x.shape}")
    out = x.data[..., None, :, :] + masks
    return _result(out, (x,), lambda g: (g.sum(axis=-3),))


def masked_softmax_stack(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Fused ``softmax(masked_add_stack(x, masks))`` for masks whose admitted sets are disjoint.

    ``allowed`` is a boolean (M, l, l) stack; no (m, n) may be admitted by two
    masks. Exponentials are taken once on ``x``, and each row is normalised
    within every mask's admitted set. Rows with an empty admitted set are zero.
    Falls back to the unfused route if a shared row shift underflows a group.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.ndim != 3 or allowed.shape[1:] != x.shape[-2:]:
        raise ShapeError(f"masked_softmax_stack: masks {allowed.shape} incompatible with {x.shape}")
    if (allowed.sum(axis=0) > 1).any():
        raise ValueError("masked_softmax_stack needs disjoint masks")
    X = x.data
    M, l, _ = allowed.shape
    lead = X.shape[:-2]
    onehot = allowed.astype(X.dtype)
    covered = allowed.any(axis=0)
    shift = np.where(covered, X, np.finfo(X.dtype).min).max(axis=-1, keepdims=True)
    E = np.exp(X - shift) * covered
    # group sums, (l, P, M) via one batched matmul over the query node
    Em = np.moveaxis(E.reshape((-1, l, l)), 1, 0)
    s = Em @ np.transpose(onehot, (1, 2, 0))
    nonempty = allowed.any(axis=-1).T[:, None, :]            # (l, 1, M)
    if (nonempty & (s <= np.finfo(X.dtype).tiny)).any():
        fallback = np.where(allowed, 0.0, np.finfo(X.dtype).min).astype(X.dtype)
        return softmax(masked_add_stack(x, fallback))
    inv = np.where(nonempty, 1.0 / np.where(nonempty, s, 1), 0).astype(X.dtype)
    inv = np.moveaxis(inv, 0, 1).reshape(lead + (l, M))     # (..., l, M)
    inv = np.swapaxes(inv, -1, -2)[..., None]                # (..., M, l, 1)
    y = E[..., None, :, :] * onehot * inv

    def fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - inner)).sum(axis=-3),)

    return _result(y, (x,), fn)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    X = x.data
    c = X.dtype.type(math.sqrt(2.0 / math.pi))
    X2 = X * X
    inner = c * (X + X.dtype.type(0.044715) * X2 * X)
    t = np.tanh(inner)
    out = 0.5 * X * (1.0 + t)

    def fn(g):
        dinner = c * (1.0 + X.dtype.type(3 * 0.044715) * X2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * dinner),)

    return _result(out, (x,), fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows consisting only of MASKED entries become zero rows."""
    X = x.data
    floor = np.finfo(X.dtype).min * X.dtype.type(_MASK_FRACTION)
    mx = X.max(axis=-1, keepdims=True)
    dead = mx <= floor
    e = np.exp(X - np.where(dead, 0, mx))
    e = np.where(dead, 0, e)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(dead, 1, s)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), fn)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * rstd
    G = gamma.data
    axes = tuple(range(x.ndim - 1))

    def fn(g):
        gx = g * G
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(xhat * G + beta.data, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# indexing, joining, reductions

def gather_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    rows = table.shape[0]

    def fn(g):
        return (_scatter(g.reshape((-1,) + table.shape[1:]), idx.ravel(), rows),)

    return _result(table.data[idx], (table,), fn)


def _scatter(src: np.ndarray, idx: np.ndarray, rows: int) -> np.ndarray:
    out = np.zeros((rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def scatter_add(src: Tensor, idx, num_rows: int) -> Tensor:
    """Sum rows of ``src`` into ``num_rows`` buckets; the adjoint of ``gather_rows``."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if src.shape[0] != idx.size:
        raise ShapeError(f"scatter_add: {src.shape[0]} rows but {idx.size} indices")
    return _result(_scatter(src.data, idx, num_rows), (src,), lambda g: (g[idx],))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    for t in xs[1:]:
        rest_a = list(xs[0].shape)
        rest_b = list(t.shape)
        del rest_a[axis], rest_b[axis]
        if rest_a != rest_b:
            raise ShapeError(f"concat: shapes {xs[0].shape} and {t.shape} differ off axis {axis}")
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)

        def fn(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_result(x.data[sl], (x,), fn))
        start += n
    return outs


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


def squared_error(pred: Tensor, target) -> Tensor:
    """Mean over the leading (sample) axis of the squared Frobenius error."""
    t = as_tensor(target, dtype=pred.dtype)
    _check_same("squared_error", pred, t)
    diff = pred.data - t.data
    n = pred.shape[0]
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _result(out, (pred, t), lambda g: (2 * g * diff / n, -2 * g * diff / n))


# ---------------------------------------------------------------------------
# randomness and initialisation

def seeded_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    a = xavier_bound(fan_in, fan_out)
    return rng.uniform(-a, a, size=shape).astype(dtype)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)
