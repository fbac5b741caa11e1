"""Dense float64 tensors with reverse-mode and forward-mode differentiation.

Reverse mode builds an operation graph while grad recording is enabled;
``backward`` replays it from a scalar root and hands back one gradient per
participating leaf. Forward mode propagates a tangent buffer alongside the
values (dual numbers), which is what ``jvp``/``jacobian`` use: Jacobians are
assembled column by column with one tangent pass per latent coordinate, so
the cost scales with the latent dimension rather than the output dimension.

Primitive set: matmul (with transpose flags), add/sub/mul with numpy
broadcasting, exp, log, tanh, relu, softplus, square, sqrt, negation,
sum/mean reductions, reshape, indexing, concatenation. Everything downstream
is composed from these.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable reverse-mode graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Immutable dense array, optionally part of a gradient record.

    ``data`` is always a float64 ndarray. ``tangent``, when present, is the
    forward-mode dual part and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tangent", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, tangent=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tangent = None if tangent is None else np.asarray(tangent, dtype=np.float64)
        if self.tangent is not None and self.tangent.shape != self.data.shape:
            raise DimensionError(
                f"tangent shape {self.tangent.shape} != value shape {self.data.shape}"
            )
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        """Value-only copy: never receives gradient contributions."""
        return Tensor(self.data)

    def with_tangent(self, tangent) -> "Tensor":
        """Detached copy carrying a forward-mode tangent."""
        return Tensor(self.data, tangent=tangent)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], vjp, tangent) -> Tensor:
    out = Tensor(data, tangent=tangent)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _tan(t: Tensor):
    return t.tangent


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    tangent = None
    if a.tangent is not None or b.tangent is not None:
        ta = a.tangent if a.tangent is not None else np.zeros_like(a.data)
        tb = b.tangent if b.tangent is not None else np.zeros_like(b.data)
        tangent = ta + tb

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp, tangent)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    tangent = None
    if a.tangent is not None or b.tangent is not None:
        ta = a.tangent if a.tangent is not None else np.zeros_like(a.data)
        tb = b.tangent if b.tangent is not None else np.zeros_like(b.data)
        tangent = ta - tb

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp, tangent)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    tangent = None
    if a.tangent is not None or b.tangent is not None:
        tangent = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        if a.tangent is not None:
            tangent = tangent + a.tangent * b.data
        if b.tangent is not None:
            tangent = tangent + a.data * b.tangent

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp, tangent)


def neg(a: Tensor) -> Tensor:
    tangent = None if a.tangent is None else -a.tangent
    return _make(-a.data, (a,), lambda g: (-g,), tangent)


def matmul(a: Tensor, b: Tensor, ta: bool = False, tb: bool = False) -> Tensor:
    """Matrix product with optional operand transposes (BLAS-style flags)."""
    A = a.data.T if ta else a.data
    B = b.data.T if tb else b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape}{'^T' if ta else ''} and "
            f"{b.shape}{'^T' if tb else ''}"
        )
    data = A @ B
    tangent = None
    if a.tangent is not None or b.tangent is not None:
        tangent = np.zeros_like(data)
        if a.tangent is not None:
            TA = a.tangent.T if ta else a.tangent
            tangent = tangent + TA @ B
        if b.tangent is not None:
            TB = b.tangent.T if tb else b.tangent
            tangent = tangent + A @ TB

    def vjp(g):
        ga = g @ B.T
        gb = A.T @ g
        if ta:
            ga = ga.T
        if tb:
            gb = gb.T
        return ga, gb

    return _make(data, (a, b), vjp, tangent)


# -- elementwise nonlinearities ---------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    tangent = None if a.tangent is None else a.tangent * data
    return _make(data, (a,), lambda g: (g * data,), tangent)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    tangent = None if a.tangent is None else a.tangent / a.data
    return _make(data, (a,), lambda g: (g / a.data,), tangent)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    dsig = 1.0 - data * data
    tangent = None if a.tangent is None else a.tangent * dsig
    return _make(data, (a,), lambda g: (g * dsig,), tangent)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)
    tangent = None if a.tangent is None else a.tangent * mask
    return _make(data, (a,), lambda g: (g * mask,), tangent)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)
    dsig = _sigmoid(a.data)
    tangent = None if a.tangent is None else a.tangent * dsig
    return _make(data, (a,), lambda g: (g * dsig,), tangent)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data
    tangent = None if a.tangent is None else 2.0 * a.data * a.tangent
    return _make(data, (a,), lambda g: (g * 2.0 * a.data,), tangent)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    # Guarded denominator: keeps sqrt(0) finite in the backward pass (the
    # forward value stays exact, which the gradient-penalty identities need).
    safe = np.maximum(data, 1e-150)
    tangent = None if a.tangent is None else a.tangent / (2.0 * safe)
    return _make(data, (a,), lambda g: (g / (2.0 * safe),), tangent)


# -- reductions and shape ops ------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    tangent = None if a.tangent is None else a.tangent.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), vjp, tangent)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    tangent = None if a.tangent is None else a.tangent.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _make(data, (a,), vjp, tangent)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    tangent = None if a.tangent is None else a.tangent.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), tangent)


def take(a: Tensor, idx) -> Tensor:
    """Slice/gather; supports numpy basic and advanced indexing."""
    data = a.data[idx]
    tangent = None if a.tangent is None else a.tangent[idx]

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), vjp, tangent)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    tangent = None
    if any(p.tangent is not None for p in parts):
        tangent = np.concatenate(
            [p.tangent if p.tangent is not None else np.zeros_like(p.data) for p in parts],
            axis=axis,
        )
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), vjp, tangent)


# -- reverse mode ------------------------------------------------------------


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar root w.r.t. every participating leaf.

    Populates ``t.grad`` (overwriting, not accumulating) on every tensor in
    the record that requires grad, and returns ``{id(leaf): grad}`` for the
    leaves. Deterministic: identical inputs produce identical gradient bytes.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    leaves = {}
    for node in order:
        if node._vjp is None and node.requires_grad and id(node) in grads:
            leaves[id(node)] = grads[id(node)]
    return leaves


# -- forward mode ------------------------------------------------------------


def jvp(f, z: Tensor, v: Tensor) -> Tensor:
    """Exact Jacobian-vector product J_f(z)·v via dual-number propagation."""
    v = _as_tensor(v)
    if v.shape != z.shape:
        raise DimensionError(f"jvp direction shape {v.shape} != point shape {z.shape}")
    with no_grad():
        out = f(z.with_tangent(v.data))
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    return Tensor(tangent)


def jacobian(f, z: Tensor) -> Tensor:
    """Full Jacobian of ``f`` at ``z`` (a 1-D point), columns via ``jvp``."""
    z = _as_tensor(z)
    d = z.data.reshape(-1).size
    cols = []
    for i in range(d):
        e = np.zeros(z.shape)
        e.reshape(-1)[i] = 1.0
        cols.append(jvp(f, z, Tensor(e)).data.reshape(-1))
    return Tensor(np.stack(cols, axis=1))


def jacobian_batch(f, Z: np.ndarray) -> np.ndarray:
    """Jacobians for a batch of row points: returns [N, M, d].

    ``f`` must map row-wise ([N, d] -> [N, M]); one tangent pass per latent
    coordinate covers the whole batch.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    cols = []
    for i in range(d):
        tang = np.zeros_like(Z)
        tang[:, i] = 1.0
        with no_grad():
            out = f(Tensor(Z, tangent=tang))
        t = out.tangent if out.tangent is not None else np.zeros_like(out.data)
        cols.append(t)
    return np.stack(cols, axis=2)
