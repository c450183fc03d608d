"""Tape-based reverse-mode autodiff over small dense float64 arrays.

Ops executed while a :class:`Tape` is active are recorded on it when at least
one input requires a gradient; ``backward`` replays the tape in reverse.
Outside of any tape the same ops run as plain numpy (fast inference path).

Also houses the Gumbel straight-through sampler used for every discrete
choice in the model (merge selection and node-role classification).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-8

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        # leaves that train get a zero accumulator up front; intermediates allocate lazily
        self.grad = np.zeros_like(self.value) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of executed ops; use as a context manager."""

    def __init__(self) -> None:
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.ops)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(value: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, registering ``backward_fn`` on the active tape.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per input, in order.
    """
    if not math.isfinite(value.sum()):
        raise FloatingPointError("non-finite value produced by op")
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = needs
    out.name = None
    out.grad = None
    if needs:
        tape.ops.append((out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, output: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(output)/d(leaf) into every leaf's ``grad``."""
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if tape.consumed:
        raise RuntimeError("tape already replayed; record a fresh one")
    tape.consumed = True
    if not output.requires_grad:
        return
    g0 = np.full_like(output.value, seed)
    output.grad = g0 if output.grad is None else output.grad + g0
    for out, inputs, fn in reversed(tape.ops):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return record(-a.value, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return record(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise FloatingPointError("log of non-positive value")
    return record(np.log(x), (a,), lambda g: (g / x,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# -- linear algebra and shape ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def grad(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return record(av @ bv, (a, b), grad)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.value for t in ts], axis=axis), ts,
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    n = len(ts)
    return record(np.stack([t.value for t in ts], axis=axis), ts,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(a: Tensor, index) -> Tensor:
    """Indexing/slicing; integer-array indices accumulate repeated rows."""
    shape = a.shape
    fancy = isinstance(index, (list, np.ndarray))
    if fancy:
        index = np.asarray(index, dtype=np.intp)

    def grad(g):
        z = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(z, index, g)
        else:
            z[index] += g
        return (z,)

    return record(a.value[index], (a,), grad)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(np.asarray(a.value.sum(axis=axis)), (a,), grad)


# -- normalizers ----------------------------------------------------------


def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("empty support: every entry is masked")
    return np.where(mask, x, -np.inf)


def softmax_values(x: np.ndarray, mask=None) -> np.ndarray:
    z = _masked(np.asarray(x, dtype=DTYPE), mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a, mask=None) -> Tensor:
    """Max-stabilized softmax over the last axis; masked entries are exactly 0."""
    a = as_tensor(a)
    if a.value.size == 0:
        raise ValueError("softmax of an empty vector")
    s = softmax_values(a.value, mask)
    return record(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    x = a.value
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)
    return record(y, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def l2_normalize_values(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(n > eps, n, 1.0)
    return np.where(n > eps, x / safe, 0.0)


def l2_normalize(a, eps: float = NORM_EPS) -> Tensor:
    """Unit-L2 rows; rows with norm <= eps map to the zero vector."""
    a = as_tensor(a)
    if a.value.size == 0:
        raise ValueError("l2_normalize of an empty vector")
    x = a.value
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    live = n > eps
    safe = np.where(live, n, 1.0)
    y = np.where(live, x / safe, 0.0)

    def grad(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - y * proj) / safe, 0.0),)

    return record(y, (a,), grad)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    return record(np.asarray(hard, dtype=DTYPE), (soft,), lambda g: (g,))


# -- Gumbel straight-through sampling --------------------------------------


@dataclass
class GumbelSampler:
    tau: float = 1.0
    noise_enabled: bool = True
    seed: int | None = None
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        self.rng = np.random.default_rng(self.seed)

    def gumbel(self, n: int) -> np.ndarray:
        if not self.noise_enabled:
            return np.zeros(n, dtype=DTYPE)
        tiny = np.finfo(DTYPE).tiny
        u = np.clip(self.rng.random(n), tiny, 1.0 - 1e-16)
        return -np.log(-np.log(u))


class GumbelSample(NamedTuple):
    index: int
    onehot: Tensor  # exact one-hot forward, gradient routed into ``soft``
    soft: Tensor


def gumbel_st_sample(sampler: GumbelSampler, logits, mask=None) -> GumbelSample:
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.value)):
        raise FloatingPointError("logits must be finite")
    g = sampler.gumbel(logits.shape[-1])
    perturbed = add(logits, g) if sampler.noise_enabled else logits
    if sampler.tau != 1.0:
        perturbed = scale(perturbed, 1.0 / sampler.tau)
    soft = softmax(perturbed, mask)
    idx = int(np.argmax(_masked(perturbed.value, mask)))
    hard = np.zeros(logits.shape[-1], dtype=DTYPE)
    hard[idx] = 1.0
    return GumbelSample(idx, straight_through(hard, soft), soft)


def onehot(index: int, n: int) -> np.ndarray:
    v = np.zeros(n, dtype=DTYPE)
    v[index] = 1.0
    return v


# -- gradient checking ----------------------------------------------------


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float]
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from dominating the report. With
    ``max_entries`` only that many randomly chosen entries per tensor are
    perturbed.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def f() -> float:
        v = fn().value
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite function value in gradient check")
        return float(v)

    report = GradCheckReport(tol, {}, [])
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            if err > tol:
                report.failures.append((name, np.unravel_index(i, p.shape), ana, num))
        report.max_rel_error[name] = worst
    for p in params.values():
        p.zero_grad()
    return report
