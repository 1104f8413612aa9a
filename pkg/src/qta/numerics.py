"""Dense tensors, a small reverse-mode tape, seeded randomness and 1-D FFT.

Every learnable operation in the package is built from the primitives here.
A :class:`Tensor` wraps a numpy array; operations on tensors that require
gradients record their parents and a backward closure, and
:class:`GradTape` replays them in reverse topological order.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """Immutable-by-convention n-d array with optional gradient tracking.

    Leaf tensors created with ``requires_grad=True`` are parameters; their
    ``data`` may be rebound by an optimizer but op outputs are read-only.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = _as_float_array(data, dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, name or "Tensor()")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable parameter."""
        tape = GradTape(self)
        for leaf, g in tape.leaf_gradients():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, name: str) -> Tensor:
    """Create an op output and register it on the tape if any parent needs grad.

    ``backward`` maps the upstream gradient to one gradient (or None) per parent.
    """
    data = np.asarray(data)
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.name = name
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class GradTape:
    """Operations reachable from a scalar loss, in recording (topological) order."""

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.ops: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.ops.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def gradients(self) -> dict[int, np.ndarray]:
        """Map ``id(tensor)`` to d(loss)/d(tensor) for every node on the tape."""
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.ops):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node.name}: gradient shape {pg.shape} != input shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return grads

    def leaf_gradients(self) -> list[tuple[Tensor, np.ndarray]]:
        grads = self.gradients()
        out = []
        for node in self.ops:
            if node._backward is None and id(node) in grads:
                out.append((node, grads[id(node)]))
        return out


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """d(loss)/d(p) for each p; zeros for parameters the loss does not touch."""
    grads = GradTape(loss).gradients()
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# ----------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, b, op: str) -> Tensor:
    """Strict same-shape pointwise ``add``, ``sub`` or ``mul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"elementwise {op}: shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ----------------------------------------------------------------------------
# nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data).astype(x.dtype)
    s = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * s,), "softplus")


def softmax(x) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), backward, "softmax")


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log; inputs are clamped below at ``floor`` (gradient zero there)."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor) if floor > 0 else x.data
    live = x.data >= floor
    if np.any(clamped <= 0):
        raise NonFiniteError("log of non-positive value")
    return record(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


# ----------------------------------------------------------------------------
# shape and indexing


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return record(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def columns(x, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return record(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward, "columns")


def take_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return record(table.data[ids], (table,), backward, "take_rows")


def take_columns(matrix, ids) -> Tensor:
    """Column gather returned row-wise: ``out[k] = matrix[:, ids[k]]``."""
    matrix = as_tensor(matrix)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.shape[1]):
        raise IndexError(f"column index out of range [0, {matrix.shape[1]})")
    shape = matrix.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full.T, ids, g)
        return (full,)

    return record(np.ascontiguousarray(matrix.data[:, ids].T), (matrix,), backward, "take_columns")


# ----------------------------------------------------------------------------
# FFT


def _check_fft_input(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise ValueError("FFT of a zero-length vector")
    return arr.astype(np.complex128 if arr.dtype != np.complex64 else np.complex64, copy=False)


def fft1(x) -> np.ndarray:
    """Forward DFT over the last axis; any length >= 1."""
    out = np.fft.fft(_check_fft_input(x), axis=-1)
    _check_finite(out, "fft1")
    return out


def ifft1(x) -> np.ndarray:
    """Inverse of :func:`fft1` (1/n normalisation on the inverse)."""
    out = np.fft.ifft(_check_fft_input(x), axis=-1)
    _check_finite(out, "ifft1")
    return out


def dft_naive(x) -> np.ndarray:
    """O(n^2) reference DFT used to cross-check :func:`fft1`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ basis.T


# ----------------------------------------------------------------------------
# randomness


def _stream_key(stream: str | int) -> int:
    if isinstance(stream, int):
        return stream
    return int.from_bytes(hashlib.blake2b(stream.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Rng:
    """Counter-based generator identified by a seed and a split path.

    ``generator()`` always restarts the Philox counter at zero, so the same
    (seed, path) yields the same draws everywhere. Derive independent streams
    with :meth:`split` instead of sharing one generator.
    """

    seed: int
    path: tuple[int, ...] = ()

    def split(self, stream: str | int, index: int = 0) -> Rng:
        return Rng(self.seed, self.path + (_stream_key(stream), int(index)))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


# ----------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` recomputes a scalar loss from the current ``params``. Error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [params] if isinstance(params, Tensor) else list(params)
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: non-finite loss")
    analytic = gradients(loss, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.data
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += eps
            p.data = bumped.reshape(base.shape)
            up = float(fn().data)
            bumped[i] -= 2 * eps
            p.data = bumped.reshape(base.shape)
            down = float(fn().data)
            p.data = base
            numeric = (up - down) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
