"""Dense float64 numerics: stable primitives, a reverse-mode autodiff tape,
and a finite-difference gradient checker.

Every loss in the package is built from the ops here so that one `backward`
call yields the full gradient table, with stop-gradient as an explicit op.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "NumericalError",
    "RngStream",
    "Tensor",
    "constant",
    "parameter",
    "stop_grad",
    "apply_op",
    "backward",
    "GradTable",
    "grad_check",
    "np_logsumexp_rows",
    "np_softmax",
    "np_sigmoid",
    "glorot_uniform",
]

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf where finiteness is guaranteed."""


# ---------------------------------------------------------------------------
# deterministic RNG streams

class RngStream:
    """Seeded PCG64 stream; identical seed gives an identical sample sequence.

    `derive(label)` creates an independent child stream whose sequence depends
    only on (seed, label path), so subsystems can consume randomness without
    perturbing each other.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self._key = _key
        ss = np.random.SeedSequence([self.seed, *_key])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, label: str) -> "RngStream":
        return RngStream(self.seed, self._key + (zlib.crc32(label.encode()),))

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


# ---------------------------------------------------------------------------
# stable value-level primitives

def np_logsumexp_rows(m: np.ndarray) -> np.ndarray:
    """Per-row log(sum(exp(row))) as an (N,1) column; overflow-safe."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise DimensionError(f"logsumexp_rows needs a non-empty 2-d matrix, got shape {m.shape}")
    mx = np.max(m, axis=1, keepdims=True)
    return mx + np.log(np.sum(np.exp(m - mx), axis=1, keepdims=True))


def np_softmax(v: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax of a 1-d vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"softmax expects a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractError("softmax input must be finite")
    e = np.exp(v - np.max(v))
    return e / e.sum()


_TINY = np.finfo(np.float64).tiny
_ONE_MINUS_EPS = np.nextafter(1.0, 0.0)


def np_sigmoid(x):
    """Numerically stable logistic; output clamped strictly inside (0,1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _TINY, _ONE_MINUS_EPS)


def glorot_uniform(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.gen.uniform(-lim, lim, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# autodiff tape

def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"tensors are 2-d; got ndim={a.ndim}")
    return a


class Tensor:
    """Node of the differentiation record: a 2-d float64 value plus the
    provenance needed to replay gradients. Scalars are (1,1), row vectors
    (1,d), column vectors (N,1)."""

    __slots__ = ("value", "requires_grad", "_parents", "_vjps", "name")

    def __init__(self, value, requires_grad=False, parents=(), vjps=(), name=""):
        self.value = _as_value(value)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars become constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, name="") -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name="") -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def apply_op(value, parents: Sequence[Tensor], vjps: Sequence[Callable], name="") -> Tensor:
    """Record a custom differentiable op. `vjps[i](g)` maps the output
    cotangent to the contribution for `parents[i]`; it is only invoked for
    parents that require grad."""
    return Tensor(value, parents=tuple(parents), vjps=tuple(vjps), name=name)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and not _broadcastable(av.shape, bv.shape):
        raise DimensionError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    out = av + bv
    return apply_op(out, (a, b), (lambda g: _unbroadcast(g, av.shape),
                                  lambda g: _unbroadcast(g, bv.shape)))


def _broadcastable(sa, sb):
    # matrix + row vector, matrix + column vector, anything + scalar
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            return False
    return True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(_coerce(b), -1.0))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, float(b))
    a, b = _coerce(a), _coerce(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and not _broadcastable(av.shape, bv.shape):
        raise DimensionError(f"mul: incompatible shapes {av.shape} and {bv.shape}")
    out = av * bv
    return apply_op(out, (a, b), (lambda g: _unbroadcast(g * bv, av.shape),
                                  lambda g: _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _coerce(a)
    return apply_op(a.value * c, (a,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value
    return apply_op(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_coerce(p) for p in parts]
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise DimensionError("concat_cols: row counts differ")
    widths = [p.value.shape[1] for p in parts]
    offs = np.cumsum([0] + widths)
    out = np.concatenate([p.value for p in parts], axis=1)

    def make_vjp(i):
        return lambda g: g[:, offs[i]:offs[i + 1]]

    return apply_op(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def sum_all(a: Tensor) -> Tensor:
    a = _coerce(a)
    shape = a.value.shape
    return apply_op(a.value.sum(), (a,), (lambda g: np.full(shape, float(g[0, 0])),))


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    return scale(sum_all(a), 1.0 / n)


def square(a: Tensor) -> Tensor:
    a = _coerce(a)
    av = a.value
    return apply_op(av * av, (a,), (lambda g: 2.0 * av * g,))


def log(a: Tensor) -> Tensor:
    a = _coerce(a)
    av = a.value
    return apply_op(np.log(av), (a,), (lambda g: g / av,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    a = _coerce(a)
    av = a.value
    mask = ((av > lo) & (av < hi)).astype(np.float64)
    return apply_op(np.clip(av, lo, hi), (a,), (lambda g: g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = np_sigmoid(a.value)
    return apply_op(out, (a,), (lambda g: g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    a = _coerce(a)
    av = a.value
    d = np.where(av > 0, 1.0, slope)
    return apply_op(np.where(av > 0, av, slope * av), (a,), (lambda g: g * d,))


def logsumexp_rows(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = np_logsumexp_rows(a.value)
    soft = np.exp(a.value - out)  # softmax per row, reusing the stable lse
    return apply_op(out, (a,), (lambda g: g * soft,))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return apply_op(av[idx], (a,), (vjp,))


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """Pick one entry per row (row i, column cols[i]) as an (N,1) column."""
    a = _coerce(a)
    cols = np.asarray(cols, dtype=np.intp)
    av = a.value
    rows = np.arange(av.shape[0])

    def vjp(g):
        out = np.zeros_like(av)
        out[rows, cols] = g[:, 0]
        return out

    return apply_op(av[rows, cols].reshape(-1, 1), (a,), (vjp,))


def stop_grad(a: Tensor) -> Tensor:
    """Forward the value, record nothing: gradients do not propagate past here."""
    a = _coerce(a)
    return Tensor(a.value, requires_grad=False)


# ---------------------------------------------------------------------------
# backward pass

class GradTable:
    """Gradients keyed by tensor identity; parameters the loss never touched
    read as zeros."""

    def __init__(self, grads: dict):
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return g if g is not None else np.zeros_like(t.value)

    def has(self, t: Tensor) -> bool:
        return id(t) in self._grads


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order  # children appear after all their ancestors are emitted


def backward(loss: Tensor) -> GradTable:
    """Reverse-mode sweep from a scalar loss; each node is visited once."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    if not loss.requires_grad:
        return GradTable({})
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        for p, vjp in zip(node._parents, node._vjps):
            if not p.requires_grad:
                continue
            contrib = vjp(g)
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = np.array(contrib, dtype=np.float64, copy=True)
            else:
                acc += contrib
    return GradTable(grads)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max over parameter coordinates of the relative error between the tape
    gradient of f() and a central finite difference.

    The denominator floors at 1e-8 so near-zero gradients do not blow up the
    ratio. f must evaluate finite at every probe point.
    """
    params = list(params)
    table = backward(f())
    worst = 0.0
    for p in params:
        g = table.get(p)
        it = np.nditer(p.value, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = p.value[ix]
            p.value[ix] = orig + h
            fp = f().item()
            p.value[ix] = orig - h
            fm = f().item()
            p.value[ix] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite loss at probe {ix}")
            numeric = (fp - fm) / (2.0 * h)
            analytic = g[ix]
            denom = max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, abs(analytic - numeric) / denom)
            it.iternext()
    return worst
