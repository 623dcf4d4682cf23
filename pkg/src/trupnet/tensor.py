"""Dense float32 tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a row-major numpy float32 array. Operations build fresh
tensors and, while a ``Tape`` is active and any operand requires gradients,
append a node ``(output, parents, backward_rule)`` to the tape. Creation
order is topological, so ``backward`` is a single reverse sweep over the
node list.

Broadcasting follows numpy's right-aligned rules (the network only needs
leading batch dims and scalar operands); gradients are summed back to each
operand's shape. Any op that produces NaN/Inf raises ``NumericError``
instead of letting the values propagate.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float32

_ACTIVE_TAPE = None


class Tensor:
    """Immutable-after-construction n-d float32 array.

    ``grad`` is populated by :func:`backward` for leaves with
    ``requires_grad=True``; it always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are plain Python numbers
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Tape:
    """Ordered op record; every node's parents precede it in ``nodes``.

    Single-owner: one tape records one forward pass and must not be
    shared across threads.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False


@contextmanager
def no_record():
    """Temporarily disable tape recording (used by finite differencing)."""
    global _ACTIVE_TAPE
    saved = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = saved


def _wrap(out_data, parents, backward_rule):
    """Finish an op: check finiteness, wrap, and record on the active tape.

    ``backward_rule(grad_out)`` must return one gradient array (or None)
    per parent, without mutating ``grad_out``.
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericError("operation produced non-finite values")
    track = _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    if track:
        _ACTIVE_TAPE.nodes.append((out, parents, backward_rule))
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_op(a, b, fwd, bwd_a, bwd_b, name):
    if isinstance(b, Tensor):
        try:
            out = fwd(a.data, b.data)
        except ValueError as e:
            raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e
        ash, bsh = a.shape, b.shape

        def rule(g):
            return (
                _unbroadcast(bwd_a(g, a.data, b.data), ash),
                _unbroadcast(bwd_b(g, a.data, b.data), bsh),
            )

        return _wrap(out, (a, b), rule)
    c = float(b)
    out = fwd(a.data, DTYPE(c))

    def rule_scalar(g):
        return (bwd_a(g, a.data, c),)

    return _wrap(out, (a,), rule_scalar)


def add(a: Tensor, b):
    return _broadcast_op(
        a, b,
        lambda x, y: x + y,
        lambda g, x, y: g,
        lambda g, x, y: g,
        "add",
    )


def sub(a: Tensor, b):
    return _broadcast_op(
        a, b,
        lambda x, y: x - y,
        lambda g, x, y: g,
        lambda g, x, y: -g,
        "sub",
    )


def mul(a: Tensor, b):
    return _broadcast_op(
        a, b,
        lambda x, y: x * y,
        lambda g, x, y: g * y,
        lambda g, x, y: g * x,
        "mul",
    )


def _quiet_div(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / y


def div(a: Tensor, b):
    return _broadcast_op(
        a, b,
        _quiet_div,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "div",
    )


def neg(a: Tensor):
    return _wrap(-a.data, (a,), lambda g: (-g,))


def maximum_scalar(a: Tensor, c: float):
    """Elementwise max(a, c); gradient is zero where a <= c."""
    c = float(c)
    out = np.maximum(a.data, DTYPE(c))
    mask = a.data > c

    def rule(g):
        return (g * mask,)

    return _wrap(out, (a,), rule)


def clip(a: Tensor, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes where lo <= a <= hi."""
    out = np.clip(a.data, DTYPE(lo), DTYPE(hi))
    mask = (a.data >= lo) & (a.data <= hi)

    def rule(g):
        return (g * mask,)

    return _wrap(out, (a,), rule)


def log(a: Tensor):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def rule(g):
        return (g / ad,)

    return _wrap(out, (a,), rule)


def matmul(a: Tensor, b: Tensor):
    """Batched matrix product [..,M,K] x [..,K,N] -> [..,M,N].

    Leading batch dims broadcast; gradients are summed back over
    broadcast axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} do not agree")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from e
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def rule(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ash)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bsh)
        return ga, gb

    return _wrap(out, (a, b), rule)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        shape = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False):
    axes_t = _normalize_axes(axes, a.ndim)
    out = a.data.sum(axis=axes_t, keepdims=keepdims, dtype=DTYPE)
    in_shape = a.shape

    def rule(g):
        return (_expand_reduced(g, in_shape, axes_t, keepdims),)

    return _wrap(np.asarray(out, dtype=DTYPE), (a,), rule)


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False):
    axes_t = _normalize_axes(axes, a.ndim)
    count = 1
    for ax in axes_t:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes_t, keepdims=keepdims, dtype=DTYPE)
    in_shape = a.shape
    inv = DTYPE(1.0 / count)

    def rule(g):
        return (_expand_reduced(g, in_shape, axes_t, keepdims) * inv,)

    return _wrap(np.asarray(out, dtype=DTYPE), (a,), rule)


def reshape(a: Tensor, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e
    in_shape = a.shape

    def rule(g):
        return (g.reshape(in_shape),)

    return _wrap(out, (a,), rule)


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inv),)

    return _wrap(out, (a,), rule)


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep: populate ``grad`` on every requires_grad leaf.

    The tape is cleared afterwards and must not be replayed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, parents, rule in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        parent_grads = rule(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                holders[key] = p
    for key, t in holders.items():
        if t.requires_grad:
            t.grad = np.asarray(grads[key], dtype=DTYPE)
    tape.nodes.clear()


def finite_diff_grad(f, x: Tensor, h: float | None = None) -> Tensor:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    With ``h=None`` the per-element step is 1e-2 * max(1, |x_i|).
    ``f`` must be deterministic; recording is suspended while probing.
    """
    if h is not None and not h > 0:
        raise ContractError("finite difference step must be positive")

    def eval_at(arr):
        out = f(Tensor(arr))
        return float(out.data.reshape(())) if isinstance(out, Tensor) else float(out)

    base = np.array(x.data, dtype=DTYPE, copy=True)
    flat = base.ravel()
    grad = np.empty(flat.shape, dtype=np.float64)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            step = h if h is not None else 1e-2 * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            f_plus = eval_at(base)
            flat[i] = orig - step
            f_minus = eval_at(base)
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * step)
    return Tensor(grad.reshape(base.shape).astype(DTYPE))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad)
