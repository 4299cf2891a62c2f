"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient back onto the inputs.
``backward`` walks the resulting DAG in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "RngStream",
    "backward",
    "no_grad",
    "scope",
    "matmul",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "gelu",
    "normal_sf",
    "std_normal_cdf",
    "layer_norm",
    "concat",
    "scatter_add_rows",
    "cross_entropy",
    "sample_gaussian",
]

_grad_enabled = True
_scopes: list[str] = []
# Observers receive (scope, multiply_adds) for every matmul executed.
_matmul_observers: list[Callable[[str, int], None]] = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Label matmuls executed inside the block (used by FLOP metering)."""
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def current_scope() -> str:
    return _scopes[-1] if _scopes else "other"


def add_matmul_observer(fn: Callable[[str, int], None]) -> None:
    _matmul_observers.append(fn)


def remove_matmul_observer(fn: Callable[[str, int], None]) -> None:
    _matmul_observers.remove(fn)


class Tensor:
    """A float64 array that optionally participates in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _lift(other)
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _lift(other)
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)), "sub")

    def __rsub__(self, other) -> Tensor:
        return _lift(other) - self

    def __mul__(self, other) -> Tensor:
        other = _lift(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _lift(other)
        a, b = self.data, other.data
        return _make(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, self.shape),
                                _unbroadcast(-g * a / (b * b), other.shape)), "div")

    def __rtruediv__(self, other) -> Tensor:
        return _lift(other) / self

    def __neg__(self) -> Tensor:
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float) -> Tensor:
        a = self.data
        return _make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        shape = self.shape
        out = self.data[idx]

        def bw(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return _make(out, (self,), bw, "getitem")

    # reductions and shape -----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        old = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> Tensor:
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> Tensor:
        return self.transpose()

    # element-wise --------------------------------------------------------
    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        a = self.data
        return _make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return _make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, bw, op)
    return Tensor(data, op=op)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Each node is visited exactly once, in reverse topological order. Returns
    the gradients of ``params`` (zeros for ones the loss does not touch).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
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
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


# kernels ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B
    if _matmul_observers:
        batch = int(np.prod(A.shape[:-2])) if A.ndim > 2 else 1
        macs = batch * A.shape[-2] * A.shape[-1] * B.shape[-1]
        for fn in _matmul_observers:
            fn(current_scope(), macs)

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if b.ndim == 2 and A.ndim > 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by max subtraction."""
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def std_normal_cdf(z: float) -> float:
    """Phi(z) for a scalar, via the complementary error function."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _pdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    a = x.data
    cdf = special.ndtr(a)
    return _make(a * cdf, (x,), lambda g: (g * (cdf + a * _pdf(a)),), "gelu")


def normal_sf(x: Tensor) -> Tensor:
    """Element-wise 1 - Phi(x)."""
    a = x.data
    return _make(special.ndtr(-a), (x,), lambda g: (-g * _pdf(a),), "normal_sf")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    n = a.shape[-1]

    def bw(g):
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * G + bias.data, (x, gain, bias), bw, "layer_norm")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def scatter_add_rows(values: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """out[index[j]] += values[j]; rows never indexed stay zero."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + values.shape[1:])
    np.add.at(out, index, values.data)
    return _make(out, (values,), lambda g: (g[index],), "scatter_add_rows")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    return -lp[np.arange(len(labels)), labels].mean()


# randomness ---------------------------------------------------------------

class RngStream:
    """Counter-based (Philox) random stream.

    ``child(name)`` derives an independent stream keyed by (seed, name), so
    initialisation, routing noise and data order never share draws.
    """

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.name = name
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        if name:
            words.append(zlib.crc32(name.encode()))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, name: str) -> RngStream:
        return RngStream(self.seed, f"{self.name}/{name}" if self.name else name)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return mean + std * self._gen.standard_normal(shape)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "name": self.name,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> RngStream:
        rng = cls(state["seed"], state["name"])
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(state["counter"], dtype=np.uint64),
                      "key": np.array(state["key"], dtype=np.uint64)},
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng


def sample_gaussian(rng: RngStream, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return Tensor(rng.normal(shape, mean, std))
