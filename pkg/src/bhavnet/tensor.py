"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive computes its value with numpy and, when a :class:`GradTape`
is active, records a closure mapping the output adjoint to input adjoints.
``GradTape.gradient`` replays those closures in exact reverse order.

Randomness goes through :class:`Rng`, a PCG64 generator (numpy's
``np.random.PCG64``) seeded from a ``SeedSequence``; named purposes
(``init``, ``dropout``, ``sampling``, ``split``) get independent child streams.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidInputError(ValueError):
    """An operation received an input outside its domain."""


class InvalidConfigError(ValueError):
    """A numeric setting is outside its allowed range."""


class EvaluationError(ArithmeticError):
    """A function under gradient check produced a non-finite value."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable float64 array plus an identity the gradient tape can key on.

    ``data`` is never mutated by operations; optimizers rebind it to a new
    array (see :func:`bhavnet.train.sgd_step`).
    """

    __slots__ = ("data", "name", "__weakref__")
    # make ndarray <op> Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidInputError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # operator sugar keeps model code readable
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE_TAPES: list[GradTape] = []


class GradTape:
    """Ordered record of primitive applications.

    Use as a context manager; while open, every primitive appends
    ``(output, inputs, adjoint_fn)``. Nested tapes each record.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> GradTape:
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable) -> None:
        self.ops.append((out, inputs, adjoint))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of ``sum(target)`` with respect to each source.

        Sources never reached get zero arrays of their own shape.
        """
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, adjoint in reversed(self.ops):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, adjoint(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [np.array(grads.get(id(s), np.zeros_like(s.data)), dtype=np.float64) for s in sources]


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], adjoint: Callable) -> Tensor:
    out = Tensor(value)
    for tape in _ACTIVE_TAPES:
        tape.record(out, inputs, adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def _binary(a, b, name: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    A, B = a.data, b.data
    return _emit(
        A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x, index: Sequence[int]) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on the way back."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def adjoint(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), adjoint)


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh_op(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.atleast_1d(x)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.reshape(x.shape)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return _emit(np.log(X), (x,), lambda g: (g / X,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-shifted.

    Entries equal to ``-inf`` get probability 0 (masked attention), as long
    as each row keeps at least one finite logit.
    """
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[-1] == 0:
        raise InvalidInputError("softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    if not ts:
        raise InvalidInputError("concat of zero tensors")
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    try:
        value = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as err:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {err}") from None
    cuts = np.cumsum(sizes)[:-1]
    return _emit(value, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)))


def sum_op(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    return _emit(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean_op(x) -> Tensor:
    x = as_tensor(x)
    return mul(sum_op(x), 1.0 / x.data.size)


def mean_rows(x) -> Tensor:
    """Column-wise mean of a matrix (average of its rows)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError(f"mean_rows needs a non-empty matrix, got shape {x.shape}")
    n = x.shape[0]
    return _emit(x.data.mean(axis=0), (x,), lambda g: (np.tile(g / n, (n, 1)),))


def rowwise_dot(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"rowwise_dot: {u.shape} vs {v.shape}")
    U, V = u.data, v.data
    return _emit(
        (U * V).sum(axis=-1),
        (u, v),
        lambda g: (np.expand_dims(g, -1) * V, np.expand_dims(g, -1) * U),
    )


NORM_FLOOR = 1e-12


def cosine_rows(u, v) -> Tensor:
    """Row-wise cosine similarity; rows where either norm is below 1e-12 give 0.

    The guarded branch is constant, so its gradient is 0.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine: {u.shape} vs {v.shape}")
    U, V = u.data, v.data
    nu = np.linalg.norm(U, axis=-1)
    nv = np.linalg.norm(V, axis=-1)
    ok = (nu >= NORM_FLOOR) & (nv >= NORM_FLOOR)
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    dots = (U * V).sum(axis=-1)
    c = np.where(ok, dots / (nu_s * nv_s), 0.0)

    def adjoint(g):
        g = np.where(ok, g, 0.0)[..., None]
        cc = c[..., None]
        a, b = nu_s[..., None], nv_s[..., None]
        gu = g * (V / (a * b) - cc * U / (a * a))
        gv = g * (U / (a * b) - cc * V / (b * b))
        return gu, gv

    return _emit(c, (u, v), adjoint)


def dropout(x, rate: float, training: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout: survivors scaled by ``1/(1-rate)``; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise InvalidConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InvalidConfigError("training-mode dropout needs an Rng")
    keep = rng.uniform(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _emit(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# Randomness and initialization
# ---------------------------------------------------------------------------

STREAMS = {"init": 0, "dropout": 1, "sampling": 2, "split": 3}


class Rng:
    """PCG64 generator with named, independent child streams."""

    algorithm = "PCG64"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0:
            raise InvalidConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))

    def stream(self, purpose: str | int) -> Rng:
        code = STREAMS[purpose] if isinstance(purpose, str) else int(purpose)
        return Rng(self.seed, self._key + (code,))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def xavier_init(rows: int, cols: int, rng: Rng, name: str | None = None) -> Tensor:
    if rows <= 0 or cols <= 0:
        raise InvalidConfigError(f"xavier_init needs positive extents, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform((rows, cols), -bound, bound), name=name)


# ---------------------------------------------------------------------------
# Finite-difference checker
# ---------------------------------------------------------------------------


def _scalar(value: Tensor | float) -> float:
    v = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    total = float(np.sum(v))
    if not math.isfinite(total):
        raise EvaluationError(f"function value is not finite: {total}")
    return total


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    per_param: bool = False,
):
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` (whose ``data`` is
    temporarily rebound to perturbed copies). Returns the maximum over all
    coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``;
    with ``per_param=True`` returns a list with one maximum per parameter.
    """
    if eps <= 0:
        raise InvalidConfigError(f"eps must be positive, got {eps}")
    params = list(params)
    with GradTape() as tape:
        out = f()
    _scalar(out)
    analytic = tape.gradient(out, params)

    errors = []
    for p, ga in zip(params, analytic):
        base = p.data
        worst = 0.0
        flat = base.reshape(-1)
        for k in range(flat.size):
            bumped = flat.copy()
            bumped[k] = flat[k] + eps
            p.data = bumped.reshape(base.shape)
            f_plus = _scalar(f())
            bumped[k] = flat[k] - eps
            p.data = bumped.reshape(base.shape)
            f_minus = _scalar(f())
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ga.reshape(-1)[k])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        p.data = base
        errors.append(worst)
    return errors if per_param else max(errors, default=0.0)
