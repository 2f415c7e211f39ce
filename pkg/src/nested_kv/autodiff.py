"""Reverse-mode autodiff over whole matrices.

Values are float64 arrays whose last two axes are (rows, cols); an optional
leading batch axis broadcasts the way ``np.matmul`` does. Every primitive
pushes one node on a :class:`Tape`; ``backward`` walks the tape once in
reverse and returns gradients for leaves marked trainable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .linalg import mat_inverse, n_skew_params

PROB_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class NotScalar(ValueError):
    pass


class Tape:
    """Append-only record of primitive applications.

    With ``grad=False`` nothing but forward values are kept, which makes the
    same model code usable for plain inference.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.needs_grad: list[bool] = []
        self.trainable: set[int] = set()

    def __len__(self):
        return len(self.values)

    def _push(self, value, parents: tuple["Var", ...] = (), vjp=None) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"non-finite forward value at node {len(self.values)}")
        needs = self.grad and any(self.needs_grad[p.node] for p in parents)
        self.values.append(value)
        self.parents.append(tuple(p.node for p in parents))
        self.vjps.append(vjp if needs else None)
        self.needs_grad.append(needs)
        return Var(self, len(self.values) - 1)

    def leaf(self, value, trainable: bool = False) -> "Var":
        var = self._push(value)
        if trainable and self.grad:
            self.needs_grad[var.node] = True
            self.trainable.add(var.node)
        return var

    def const(self, value) -> "Var":
        return self.leaf(value, trainable=False)


class Var:
    __slots__ = ("tape", "node")

    def __init__(self, tape: Tape, node: int):
        self.tape = tape
        self.node = node

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.node]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(node={self.node}, shape={self.shape})"


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, what: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{what}: {a.shape} vs {b.shape}") from None


# -- elementwise ----------------------------------------------------------


def add(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return a.tape._push(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return a.tape._push(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scalar_mul(a: Var, c: float) -> Var:
    return a.tape._push(c * a.value, (a,), lambda g: (c * g,))


def mul(a: Var, b) -> Var:
    """Elementwise product; ``b`` may be a constant array (e.g. RoPE tables)."""
    b = _lift(a.tape, b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return a.tape._push(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def silu(a: Var) -> Var:
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    return a.tape._push(x * sig, (a,), lambda g: (g * (sig + x * sig * (1.0 - sig)),))


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape._push(np.sum(a.value).reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Var) -> Var:
    return scalar_mul(sum_all(a), 1.0 / a.value.size)


# -- structural -----------------------------------------------------------


def matmul(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return a.tape._push(av @ bv, (a, b), vjp)


def transpose(a: Var) -> Var:
    return a.tape._push(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_cols(parts: Sequence[Var]) -> Var:
    tape = parts[0].tape
    widths = [p.shape[-1] for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., edges[i] : edges[i + 1]] for i in range(len(parts)))

    return tape._push(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), vjp)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    shape = a.shape
    if not 0 <= start <= stop <= shape[-1]:
        raise ShapeMismatch(f"slice [{start}:{stop}] of width {shape[-1]}")

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return a.tape._push(a.value[..., start:stop], (a,), vjp)


def embed_lookup(table: Var, ids) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return table.tape._push(table.value[ids], (table,), vjp)


def skew(params: Var, dim: int) -> Var:
    """Skew-symmetric matrix from a (1, d(d-1)/2) row of lower-triangle params."""
    if params.value.size != n_skew_params(dim):
        raise ShapeMismatch(f"skew: {params.value.size} params for dim {dim}")
    rows, cols = np.tril_indices(dim, -1)
    pshape = params.shape
    s = np.zeros((dim, dim))
    p = params.value.reshape(-1)
    s[rows, cols] = p
    s[cols, rows] = -p
    return params.tape._push(s, (params,), lambda g: ((g[rows, cols] - g[cols, rows]).reshape(pshape),))


def mat_inverse_node(a: Var) -> Var:
    y = mat_inverse(a.value)
    yt = y.T
    return a.tape._push(y, (a,), lambda g: (-yt @ g @ yt,))


# -- row-wise normalisations and losses --------------------------------


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Numerically stable softmax over the last axis; ``mask`` False entries get 0."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows(a: Var, mask: np.ndarray | None = None) -> Var:
    y = softmax(a.value, mask)
    return a.tape._push(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def rms_norm_rows(x: Var, gain: Var, eps: float = 1e-6) -> Var:
    xv, gv = x.value, gain.value
    r = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    n = xv * r

    def vjp(g):
        dn = g * gv
        dx = r * (dn - n * np.mean(dn * n, axis=-1, keepdims=True))
        return dx, _unbroadcast(g * n, gv.shape)

    return x.tape._push(n * gv, (x, gain), vjp)


def cross_entropy_rows(logits: Var, targets) -> Var:
    """Mean next-token cross-entropy over every row of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    lv = logits.value
    if targets.shape != lv.shape[:-1]:
        raise ShapeMismatch(f"targets {targets.shape} vs logits {lv.shape}")
    logp = _log_softmax(lv)
    flat = logp.reshape(-1, lv.shape[-1])
    idx = targets.reshape(-1)
    count = idx.size
    loss = -np.mean(flat[np.arange(count), idx])

    def vjp(g):
        grad = np.exp(logp)
        grad.reshape(-1, lv.shape[-1])[np.arange(count), idx] -= 1.0
        return (grad * (g[0, 0] / count),)

    return logits.tape._push(np.array([[loss]]), (logits,), vjp)


def kl_div_rows(p, q_logits: Var) -> Var:
    """Mean over rows of KL(p || softmax(q_logits)); ``p`` is a constant distribution."""
    p = np.asarray(p, dtype=np.float64)
    qv = q_logits.value
    if p.shape != qv.shape:
        raise ShapeMismatch(f"kl_div_rows: {p.shape} vs {qv.shape}")
    logq = _log_softmax(qv)
    rows = p.size // p.shape[-1]
    val = np.sum(p * (np.log(np.maximum(p, PROB_FLOOR)) - logq)) / rows
    mass = np.sum(p, axis=-1, keepdims=True)

    def vjp(g):
        return ((np.exp(logq) * mass - p) * (g[0, 0] / rows),)

    return q_logits.tape._push(np.array([[val]]), (q_logits,), vjp)


def kl_divergence(p, q) -> np.ndarray:
    """Row-wise KL between two arrays of probabilities (0 * log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(q)), 0.0)
    return np.sum(terms, axis=-1)


# -- reverse pass -------------------------------------------------------------


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a 1x1 ``loss`` with respect to every trainable leaf."""
    if loss.value.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    if not tape.grad:
        raise ValueError("tape was built with grad=False")
    adj: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
    for node in range(loss.node, -1, -1):
        g = adj.get(node)
        if g is None:
            continue
        vjp = tape.vjps[node]
        if vjp is None:
            continue
        for parent, pg in zip(tape.parents[node], vjp(g)):
            if not tape.needs_grad[parent]:
                continue
            if parent in adj:
                adj[parent] = adj[parent] + pg
            else:
                adj[parent] = pg
        del adj[node]
    return {n: adj.get(n, np.zeros_like(tape.values[n])) for n in sorted(tape.trainable)}


def grad_check(f: Callable[[Tape, list[Var]], Var], params: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` builds the loss on the tape it is given from leaves wrapping
    ``params`` (in order).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def build(values, grad):
        tape = Tape(grad=grad)
        leaves = [tape.leaf(v, trainable=True) for v in values]
        return tape, leaves, f(tape, leaves)

    tape, leaves, loss = build(params, True)
    grads = backward(tape, loss)
    worst = 0.0
    for i, p in enumerate(params):
        analytic = grads[leaves[i].node]
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[i][idx] += h
            minus[i][idx] -= h
            fp = build(plus, False)[2].value[0, 0]
            fm = build(minus, False)[2].value[0, 0]
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst
