"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every value is a 2-D array; scalars are 1x1. Operations executed while a
:class:`Tape` is active record a local-gradient rule whenever one of their
inputs depends on a trainable tensor. Outside a tape nothing is recorded,
which is how evaluation runs.

>>> w = Tensor([[2.0]], trainable=True)
>>> with Tape() as tape:
...     loss = sum_all(mul(w, w))
...     tape.backward(loss)
>>> w.grad
array([[4.]])
"""

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "backward", "current_tape", "detach",
    "matmul", "elementwise", "add", "sub", "mul", "div", "scale", "shift",
    "neg", "relu", "exp", "log", "sqrt", "absolute", "power", "clamp_min",
    "transpose", "sum_all", "sum_rows", "sum_cols", "mean_cols",
    "tile_rows", "tile_cols", "scale_by", "pick", "slice_rows",
    "softmax_rows", "log_softmax_rows", "frobenius_norm", "segment_max",
    "sq_dists",
]


class Tensor:
    """A dense row-major matrix, optionally trainable.

    ``grad`` is populated by :meth:`Tape.backward` for trainable tensors only.
    """

    __slots__ = ("data", "grad", "trainable", "name", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, trainable=False, name=None):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim != 2:
            raise DimensionError(f"Tensor must be at most 2-D, got shape {data.shape}")
        self.data = data
        self.grad = None
        self.trainable = bool(trainable)
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.trainable = False
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

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

    @property
    def T(self):
        return transpose(self)


_TAPES = []


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes = []

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every trainable ``t``."""
        if not isinstance(loss, Tensor) or loss.shape != (1, 1):
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise ContractError(f"backward needs a scalar (1x1) loss, got {shape}")
        if loss._tape is None:
            # constant w.r.t. every trainable tensor, unless it is one itself
            if loss.trainable:
                loss.grad = _acc(loss.grad, np.ones((1, 1)))
            return
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones((1, 1))}
        for out, inputs, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif inp.trainable:
                    inp.grad = _acc(inp.grad, gi)


def _acc(prev, g):
    return g.copy() if prev is None else prev + g


def current_tape():
    return _TAPES[-1] if _TAPES else None


def backward(loss):
    """Run backward on the tape that produced ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward needs a Tensor loss")
    tape = loss._tape
    if tape is None:
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if loss.trainable:
            loss.grad = _acc(loss.grad, np.ones((1, 1)))
        return
    tape.backward(loss)


def detach(t):
    """Non-trainable copy of ``t`` that never receives gradient."""
    return Tensor._wrap(_data(t).copy())


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _record(out_data, inputs, rule):
    out = Tensor._wrap(out_data)
    tape = current_tape()
    if tape is None:
        return out
    for inp in inputs:
        if inp.trainable or inp._tape is tape:
            out._tape = tape
            tape.nodes.append((out, inputs, rule))
            break
    return out


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return shift(a, float(b))
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return shift(a, -float(b))
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def shift(a, c):
    a = _as_tensor(a)
    return _record(a.data + float(c), (a,), lambda g: (g,))


def neg(a):
    return scale(a, -1.0)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(kind, a, b):
    """Dispatch ``kind`` in {add, sub, mul, scale}; ``b`` may be a scalar."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def absolute(a):
    # subgradient 0 at a tie
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    ad = a.data
    out = ad ** p
    return _record(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def clamp_min(a, lo):
    a = _as_tensor(a)
    keep = a.data >= lo
    return _record(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def transpose(a):
    a = _as_tensor(a)
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Reductions and broadcasting


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def sum_rows(a):
    """Per-row sums, n x 1."""
    a = _as_tensor(a)
    k = a.cols
    return _record(a.data.sum(axis=1, keepdims=True), (a,),
                   lambda g: (np.repeat(g, k, axis=1),))


def sum_cols(a):
    """Per-column sums, 1 x d."""
    a = _as_tensor(a)
    n = a.rows
    return _record(a.data.sum(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g, n, axis=0),))


def mean_cols(a):
    a = _as_tensor(a)
    n = a.rows
    return _record(a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g / n, n, axis=0),))


def tile_rows(a, n):
    """Repeat a 1 x d row ``n`` times."""
    a = _as_tensor(a)
    if a.rows != 1:
        raise DimensionError(f"tile_rows needs a 1 x d row, got {a.shape}")
    return _record(np.repeat(a.data, n, axis=0), (a,),
                   lambda g: (g.sum(axis=0, keepdims=True),))


def tile_cols(a, k):
    """Repeat an n x 1 column ``k`` times."""
    a = _as_tensor(a)
    if a.cols != 1:
        raise DimensionError(f"tile_cols needs an n x 1 column, got {a.shape}")
    return _record(np.repeat(a.data, k, axis=1), (a,),
                   lambda g: (g.sum(axis=1, keepdims=True),))


def scale_by(a, s):
    """Multiply ``a`` by the 1x1 tensor ``s``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if s.shape != (1, 1):
        raise DimensionError(f"scale_by needs a 1x1 factor, got {s.shape}")
    ad, sv = a.data, s.data[0, 0]
    return _record(ad * sv, (a, s),
                   lambda g: (g * sv, np.array([[(g * ad).sum()]])))


def pick(a, i, j):
    """Entry (i, j) as a 1x1 tensor."""
    a = _as_tensor(a)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[i, j] = g[0, 0]
        return (out,)

    return _record(a.data[i:i + 1, j:j + 1].copy(), (a,), rule)


def slice_rows(a, start, stop):
    a = _as_tensor(a)
    if not 0 <= start <= stop <= a.rows:
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _record(a.data[start:stop].copy(), (a,), rule)


# ---------------------------------------------------------------------------
# Fused operations


def softmax_rows(a):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (a,), rule)


def log_softmax_rows(a):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record(out, (a,), rule)


def frobenius_norm(a):
    a = _as_tensor(a)
    ad = a.data
    v = float(np.sqrt((ad * ad).sum()))

    def rule(g):
        if v == 0.0:
            return (np.zeros_like(ad),)
        return (g[0, 0] * ad / v,)

    return _record(np.array([[v]]), (a,), rule)


def segment_max(z, assign, k):
    """Per-segment column max: out[c] = max over rows i with assign[i] == c.

    Gradient is routed to the arg-max row; ties go to the lowest row index.
    """
    z = _as_tensor(z)
    assign = np.asarray(assign)
    if assign.shape != (z.rows,):
        raise DimensionError(f"segment_max: assignment of length {assign.shape} for {z.shape}")
    d = z.cols
    out = np.empty((k, d))
    winners = np.empty((k, d), dtype=np.intp)
    cols = np.arange(d)
    for c in range(k):
        members = np.flatnonzero(assign == c)
        if members.size == 0:
            raise ContractError(f"segment_max: segment {c} is empty")
        block = z.data[members]
        arg = block.argmax(axis=0)
        winners[c] = members[arg]
        out[c] = block[arg, cols]
    shape = z.shape

    def rule(g):
        gz = np.zeros(shape)
        np.add.at(gz, (winners, np.broadcast_to(cols, winners.shape)), g)
        return (gz,)

    return _record(out, (z,), rule)


def sq_dists(q, k):
    """Squared euclidean distances between rows of ``q`` (n x d) and ``k`` (m x d)."""
    q, k = _as_tensor(q), _as_tensor(k)
    if q.cols != k.cols:
        raise DimensionError(f"sq_dists: feature widths differ {q.shape} vs {k.shape}")
    qd, kd = q.data, k.data
    diff = qd[:, None, :] - kd[None, :, :]
    out = (diff * diff).sum(axis=2)

    def rule(g):
        gq = 2.0 * (g.sum(axis=1, keepdims=True) * qd - g @ kd)
        gk = 2.0 * (g.sum(axis=0)[:, None] * kd - g.T @ qd)
        return (gq, gk)

    return _record(out, (q, k), rule)
