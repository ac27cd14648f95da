"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. With no
tape active every op runs as plain numpy and records nothing, which is the
fast path used for decoding and evaluation.

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), targets, mask)
        grads = tape.backward(loss)
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as _k

DTYPE = np.float64
_GELU_C = float(np.sqrt(2.0 / np.pi))
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


@contextmanager
def no_grad():
    """Suspend recording: ops inside run as plain numpy."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES[:] = saved


class Tensor:
    """An array with an optional slot on the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], tuple] | None


class Tape:
    """Append-only record of operations; node ids increase in record order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.node_id
        if not t.requires_grad:
            return None
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        t._tape, t.node_id, t.grad = self, nid, None
        self._leaves[nid] = t
        return nid

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        ids = tuple(self._node_of(t) for t in inputs)
        result = Tensor(out)
        if all(i is None for i in ids):
            return result
        if self._consumed:
            raise ContractError("tape already consumed by backward(); open a new Tape")
        result.requires_grad = True
        result._tape = self
        result.node_id = len(self.nodes)
        self.nodes.append(Node(op, ids, backward))
        return result

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Leaf tensors also receive their gradient in ``.grad``. A tape can be
        differentiated once; replaying requires recording a fresh tape.
        """
        if self._consumed:
            raise ContractError("backward() called twice on the same tape without reset")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss is not recorded on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if inp is None or ig is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        for nid, leaf in self._leaves.items():
            leaf.grad = grads.get(nid)
        return grads

    def reset(self) -> None:
        for leaf in self._leaves.values():
            leaf._tape, leaf.node_id = None, None
        self.nodes.clear()
        self._leaves.clear()
        self._consumed = False


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor(out)
    return tape.record(op, out, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5

    def backward(g):
        du = x * x
        du *= 3 * 0.044715 * _GELU_C
        du += _GELU_C
        du *= 1.0 - t * t
        du *= x
        du += 1.0 + t
        du *= 0.5
        du *= g
        return (du,)

    return _record("gelu", y, (a,), backward)


def grad_reverse(a: Tensor) -> Tensor:
    """Identity forward; the gradient reaching ``a`` is the negated upstream gradient."""
    return _record("grad_reverse", a.data.copy(), (a,), lambda g: (-g,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ----------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take_slice(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _record("slice", a.data[index], (a,), backward)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (backward sums over broadcast axes)."""
    old = a.shape
    return _record("expand", np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),))


def concat_rows(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


# ----------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / n)


def mean_pool_rows(x: Tensor, mask) -> Tensor:
    """Masked mean over the row axis: (B, T, H) with (B, T) weights -> (B, H)."""
    m = np.asarray(mask, dtype=DTYPE)
    if x.ndim == 2:
        return reshape(mean_pool_rows(reshape(x, (1,) + x.shape), m[None]), (x.shape[1],))
    counts = m.sum(axis=1)
    if np.any(counts <= 0):
        raise DegenerateBatchError("mean_pool_rows: a row mask selects no positions")
    w = m / counts[:, None]
    out = np.einsum("bt,bth->bh", w, x.data)
    return _record("mean_pool", out, (x,), lambda g: (w[:, :, None] * g[:, None, :],))


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding ids out of range [0, {rows})")

    def backward(g):
        flat = g.reshape(-1, g.shape[-1])
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), flat)
        return (out,)

    return _record("gather", table.data[ids], (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        n = xd.shape[-1]
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    p = _softmax(x.data)
    return _record("softmax", p, (x,),
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention where position i sees positions <= i.

    q, k, v: (..., T, d). Returns (..., T, d).
    """
    qd, kd, vd = q.data, k.data, v.data
    lead, (T, d) = qd.shape[:-2], qd.shape[-2:]
    c = 1.0 / np.sqrt(d)
    p = np.ascontiguousarray(qd @ np.swapaxes(kd, -1, -2)) * c
    _k.causal_softmax_inplace(p.reshape(-1, T, T))
    out = p @ vd

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        ds = np.ascontiguousarray(g @ np.swapaxes(vd, -1, -2))
        _k.causal_softmax_backward_inplace(p.reshape(-1, T, T), ds.reshape(-1, T, T), c)
        return ds @ kd, np.swapaxes(ds, -1, -2) @ qd, dv

    return _record("causal_attention", out, (q, k, v), backward)


# ----------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions with nonzero mask.

    ``logits`` is (..., V); ``targets`` and ``mask`` match its leading shape.
    Mask entries act as weights; the mean divides by their sum.
    """
    z = logits.data
    V = z.shape[-1]
    zf = z.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != zf.shape[0]:
        raise ShapeError(f"targets length {t.shape[0]} does not match logits rows {zf.shape[0]}")
    m = np.ones(t.shape[0], dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    if m.shape[0] != t.shape[0]:
        raise ShapeError(f"mask length {m.shape[0]} does not match logits rows {t.shape[0]}")
    total = m.sum()
    if total == 0:
        raise DegenerateBatchError("softmax_cross_entropy: mask has no nonzero entry")
    # masked rows may carry padding ids; clamp so the gather stays in range
    if np.any((t < 0) | (t >= V)):
        bad = (m != 0) & ((t < 0) | (t >= V))
        if np.any(bad):
            raise ShapeError(f"target ids out of range [0, {V})")
        t = np.clip(t, 0, V - 1)
    shifted = zf - zf.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - shifted[rows, t]
    loss = np.asarray((m * nll).sum() / total)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        p *= (m / total)[:, None] * g
        return (p.reshape(z.shape),)

    return _record("softmax_xent", loss, (logits,), backward)


# ----------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    tol: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f(*inputs)`` w.r.t. every input coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    out = []
    for x in inputs:
        flat = x.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=DTYPE)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out.append(g.reshape(x.shape))
    return out


def tape_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [x.requires_grad for x in inputs]
    for x in inputs:
        x.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(*inputs)
            tape.backward(loss)
        return [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]
    finally:
        for x, s in zip(inputs, saved):
            x.requires_grad = s


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor) with floor = 1e-6 * max(1, max|n|).

    The floor keeps coordinates whose true gradient is ~0 from dividing
    rounding noise by rounding noise.
    """
    floor = 1e-6 * max(1.0, float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor],
                      h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences."""
    inputs = [x] if isinstance(x, Tensor) else list(x)
    analytic = tape_grad(f, inputs)
    numeric = numeric_grad(f, inputs, h)
    abs_err = max(float(np.max(np.abs(a - n), initial=0.0)) for a, n in zip(analytic, numeric))
    rel_err = max(float(np.max(relative_error(a, n), initial=0.0)) for a, n in zip(analytic, numeric))
    return GradCheckReport(abs_err, rel_err, tol, analytic, numeric)
