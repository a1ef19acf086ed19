"""Dense numeric foundation: matrices, softmax, shared node-wise layers, parameters.

Node matrices are plain ``numpy`` arrays of shape ``(N, C)``. Every layer here is
applied node-wise (row-wise) with weights shared across rows, which is what makes
the correlation operators built on top of them permutation-equivariant.

Gradients are handwritten: each differentiable operation comes as a
``*_forward`` function returning ``(output, cache)`` and a ``*_backward``
function that consumes the cache.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional

import numpy as np

from .exceptions import NumericError, ShapeError, StateError

__all__ = [
    "ParamStore",
    "LinearLayer",
    "matmul",
    "row_softmax",
    "row_softmax_backward",
    "channel_softmax",
    "linear_forward",
    "linear_backward",
    "relu_forward",
    "relu_backward",
    "bottleneck_forward",
    "bottleneck_backward",
    "MUTATIONS",
]

# Test hooks that deliberately break the operations; used by the verification
# harness as negative controls. Must be empty in normal operation.
MUTATIONS: set = set()
KNOWN_MUTATIONS = ("node_coupled_bias", "unnormalized_softmax")


def _as_matrix(a, name="a") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order.

    The inner dimension is reduced sequentially (``k = 0, 1, ...``), so results
    are bit-identical to a scalar triple loop and independent of BLAS threading.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def row_softmax(a) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    Accepts any array with ``ndim >= 1``; a stack of ``K x K`` adjacencies is
    normalized row by row.
    """
    a = np.asarray(a)
    if a.ndim == 0:
        raise ShapeError("row_softmax needs at least one axis")
    if not np.all(np.isfinite(a)):
        raise NumericError("row_softmax received non-finite input")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    if "unnormalized_softmax" in MUTATIONS:
        return e
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`row_softmax` given its output."""
    return out * (dout - (dout * out).sum(axis=-1, keepdims=True))


def channel_softmax(v) -> np.ndarray:
    """Softmax over the channels of a single length-``C`` vector."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ShapeError(f"channel_softmax expects a vector, got shape {v.shape}")
    return row_softmax(v)


class ParamStore:
    """Named learnable arrays, each with a gradient slot of identical shape."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=self.dtype)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def grad(self, name: str) -> np.ndarray:
        try:
            return self._grads[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def set(self, name: str, value) -> None:
        """Overwrite a parameter's value in place (shape must match)."""
        current = self[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != current.shape:
            raise ShapeError(f"{name}: expected shape {current.shape}, got {value.shape}")
        current[...] = value

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def n_params(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            slot = self.grad(name)
            if np.shape(g) != slot.shape:
                raise ShapeError(f"gradient for {name}: expected {slot.shape}, got {np.shape(g)}")
            slot += g

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._values) - set(state)
        extra = set(state) - set(self._values)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, value in state.items():
            self.set(name, value)


@dataclass(frozen=True)
class LinearLayer:
    """Node-wise affine map ``x @ W + b`` whose arrays live in a :class:`ParamStore`."""

    store: ParamStore
    name: str
    in_dim: int
    out_dim: int

    @classmethod
    def create(cls, store: ParamStore, name: str, in_dim: int, out_dim: int,
               rng: Optional[np.random.Generator] = None, scale: Optional[float] = None,
               zero: bool = False) -> "LinearLayer":
        """Register ``name.weight`` / ``name.bias``; He-style init unless ``zero``."""
        if zero or rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            std = np.sqrt(2.0 / in_dim) if scale is None else scale
            w = rng.normal(0.0, std, size=(in_dim, out_dim))
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", np.zeros(out_dim))
        return cls(store, name, in_dim, out_dim)

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    @property
    def weight(self) -> np.ndarray:
        return self.store[self.weight_name]

    @property
    def bias(self) -> np.ndarray:
        return self.store[self.bias_name]


def linear_forward(layer: LinearLayer, x) -> np.ndarray:
    """Apply ``layer`` to every row of ``x`` (any leading batch axes allowed)."""
    x = np.asarray(x)
    if x.ndim < 1 or x.shape[-1] != layer.in_dim:
        raise ShapeError(f"{layer.name}: expected last dim {layer.in_dim}, got shape {x.shape}")
    out = x @ layer.weight + layer.bias
    if "node_coupled_bias" in MUTATIONS and out.ndim >= 2:
        # the leading axis indexes nodes, also for (N, K, C) neighborhood stacks
        rows = np.arange(out.shape[0], dtype=out.dtype).reshape((-1,) + (1,) * (out.ndim - 1))
        out = out + 1e-3 * rows
    return out


def linear_backward(layer: LinearLayer, dout: np.ndarray, x: Optional[np.ndarray]):
    """Return ``(dx, grads)`` for :func:`linear_forward` evaluated at ``x``."""
    if x is None:
        raise StateError(f"{layer.name}: backward called before forward")
    x2 = x.reshape(-1, layer.in_dim)
    d2 = dout.reshape(-1, layer.out_dim)
    grads = {
        layer.weight_name: x2.T @ d2,
        layer.bias_name: d2.sum(axis=0),
    }
    dx = dout @ layer.weight.T
    return dx, grads


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return dout * (pre > 0)


@dataclass
class BottleneckCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def bottleneck_forward(reduce: LinearLayer, expand: LinearLayer, x):
    """Two node-wise layers with a rectifier between them: ``expand(relu(reduce(x)))``."""
    pre = linear_forward(reduce, x)
    hidden = relu_forward(pre)
    out = linear_forward(expand, hidden)
    return out, BottleneckCache(np.asarray(x), pre, hidden)


def bottleneck_backward(reduce: LinearLayer, expand: LinearLayer, dout: np.ndarray,
                        cache: Optional[BottleneckCache]):
    if cache is None:
        raise StateError("bottleneck backward called before forward")
    dhidden, grads = linear_backward(expand, dout, cache.hidden)
    dpre = relu_backward(dhidden, cache.pre)
    dx, g = linear_backward(reduce, dpre, cache.x)
    grads.update(g)
    return dx, grads


def merge_grads(*parts: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Sum gradient dicts key-wise (a parameter may be reached by several paths)."""
    out: Dict[str, np.ndarray] = {}
    for part in parts:
        for k, v in part.items():
            out[k] = out[k] + v if k in out else v
    return out
