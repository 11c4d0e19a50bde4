"""Dense float64 arrays, elementwise/matrix ops and the layer contract.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1 or 2.
Every layer implements ``forward``/``backward`` by hand; ``backward`` returns
the gradient with respect to the layer input and *accumulates* parameter
gradients into ``Parameter.grad`` until ``zero_grad`` is called.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError, StateError

Tensor = np.ndarray

_CHECKED = False


def set_checked(enabled: bool) -> None:
    """Toggle finite-value validation in :func:`tensor` (debug mode)."""
    global _CHECKED
    _CHECKED = bool(enabled)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(enabled: bool = True):
    previous = _CHECKED
    set_checked(enabled)
    try:
        yield
    finally:
        set_checked(previous)


def tensor(data, *, check: bool | None = None) -> Tensor:
    """Build a contiguous float64 tensor of rank 1 or 2."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DimensionError(f"tensor must have rank 1 or 2, got shape {arr.shape}")
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
    if (_CHECKED if check is None else check) and not np.all(np.isfinite(arr)):
        raise InputError(f"non-finite values in tensor of shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def sigmoid(x):
    """Logistic function, split on sign so ``exp`` never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def uniform_init(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class Parameter:
    """A named learnable tensor with its accumulated gradient.

    ``component`` tags the parameter for size accounting (see
    ``models.count_params``).
    """

    name: str
    value: Tensor
    component: str = "other"
    grad: Tensor = field(init=False)
    # rows written by the last sparse backward (embedding tables only)
    touched_rows: np.ndarray | None = field(default=None, init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0.0
        self.touched_rows = None


class Layer:
    """Base class for hand-differentiated layers.

    Subclasses register learnable tensors in ``self._params``, child layers in
    ``self._children`` and non-learnable state (running statistics) in
    ``self._buffers``.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.training = True
        self._params: list[Parameter] = []
        self._children: list[Layer] = []
        self._buffers: dict[str, np.ndarray] = {}

    def add_param(self, suffix: str, value, component: str = "other") -> Parameter:
        p = Parameter(_join(self.name, suffix), value, component)
        self._params.append(p)
        return p

    def add_child(self, layer: "Layer") -> "Layer":
        self._children.append(layer)
        return layer

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for child in self._children:
            out.extend(child.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {_join(self.name, k): v for k, v in self._buffers.items()}
        for child in self._children:
            out.update(child.buffers())
        return out

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for child in self._children:
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _require_forward(self):
        if getattr(self, "_cache", None) is None:
            raise StateError(f"backward called before forward on layer {self.name!r}")


def _join(prefix: str, suffix: str) -> str:
    return f"{prefix}.{suffix}" if prefix else suffix


class Linear(Layer):
    """``y = x W^T + b`` with ``W`` of shape (out, in); rows of ``x`` are instances."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *, name: str,
                 bias: bool = True, component: str = "other", bias_component: str | None = None):
        super().__init__(name)
        bound = 1.0 / np.sqrt(n_in)
        self.weight = self.add_param("weight", uniform_init(rng, (n_out, n_in), bound), component)
        self.bias = None
        if bias:
            self.bias = self.add_param("bias", np.zeros(n_out), bias_component or component)
        self.n_in, self.n_out = n_in, n_out
        self._cache = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(
                f"{self.name}: input shape {x.shape} does not match weight {self.weight.shape}")
        self._cache = x
        y = x @ self.weight.value.T
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, grad):
        self._require_forward()
        x = self._cache
        self.weight.grad += grad.T @ x
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        super().__init__(name)
        self._cache = None

    def forward(self, x):
        self._cache = x
        return np.where(x > 0, x, 0.0)

    def backward(self, grad):
        self._require_forward()
        return grad * (self._cache > 0)

    def activation_pattern(self):
        return self._cache > 0


class Sequential(Layer):
    def __init__(self, layers, name: str = ""):
        super().__init__(name)
        for layer in layers:
            self.add_child(layer)

    def __iter__(self):
        return iter(self._children)

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i):
        return self._children[i]

    def forward(self, x):
        for layer in self._children:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self._children):
            grad = layer.backward(grad)
        return grad
