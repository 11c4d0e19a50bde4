"""Layer normalization, batch normalization and per-field dispatch between them.

Both norms use the population (biased) variance and ``eps = 1e-5``.
"""
from __future__ import annotations

import numpy as np

from .errors import BatchSizeError, DimensionError, StateError
from .features import FeatureSchema
from .tensor import Layer

EPS = 1e-5
MOMENTUM = 0.9


def layer_norm(v, gamma=1.0, beta=0.0, eps: float = EPS):
    """Normalize over the last axis: ``(v - mean) / sqrt(var + eps) * gamma + beta``."""
    v = np.asarray(v, dtype=np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps) * gamma + beta


def batch_norm(V, gamma, beta, running_mean, running_var, *, training: bool,
               momentum: float = MOMENTUM, eps: float = EPS):
    """Per-column normalization of a ``B x n`` batch.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    V = np.asarray(V, dtype=np.float64)
    if training:
        if V.shape[0] < 2:
            raise BatchSizeError(f"batch norm in train mode needs B >= 2, got B={V.shape[0]}")
        mu = V.mean(axis=0)
        var = ((V - mu) ** 2).mean(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    return (V - mu) / np.sqrt(var + eps) * gamma + beta


def _norm_backward(grad, xhat, inv_std, axis):
    # d/dx of (x - mean) * inv_std along `axis`, already multiplied by gamma upstream
    return inv_std * (grad - grad.mean(axis=axis, keepdims=True)
                      - xhat * (grad * xhat).mean(axis=axis, keepdims=True))


class LayerNorm(Layer):
    """Independent layer norms over ``slots`` consecutive chunks of width ``d``.

    ``gamma``/``beta`` have shape ``(slots, d)``: one affine pair per slot.
    """

    def __init__(self, slots: int, d: int, name: str, eps: float = EPS):
        super().__init__(name)
        self.slots, self.d, self.eps = slots, d, eps
        self.gamma = self.add_param("gamma", np.ones((slots, d)), "norm_affine")
        self.beta = self.add_param("beta", np.zeros((slots, d)), "norm_affine")
        self._cache = None

    def forward(self, x):
        B = x.shape[0]
        if x.shape[1] != self.slots * self.d:
            raise DimensionError(f"{self.name}: width {x.shape[1]} != {self.slots}*{self.d}")
        v = x.reshape(B, self.slots, self.d)
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (v - mu) * inv_std
        self._cache = (xhat, inv_std)
        return (xhat * self.gamma.value + self.beta.value).reshape(B, -1)

    def backward(self, grad):
        self._require_forward()
        xhat, inv_std = self._cache
        g = grad.reshape(xhat.shape)
        self.gamma.grad += (g * xhat).sum(axis=0)
        self.beta.grad += g.sum(axis=0)
        dx = _norm_backward(g * self.gamma.value, xhat, inv_std, axis=-1)
        return dx.reshape(grad.shape)


class BatchNorm(Layer):
    """Per-column batch norm over ``slots * d`` columns.

    Eval mode refuses to run before any train-mode batch has populated the
    running statistics (tracked by the ``num_batches`` buffer).
    """

    def __init__(self, slots: int, d: int, name: str, momentum: float = MOMENTUM,
                 eps: float = EPS):
        super().__init__(name)
        self.slots, self.d = slots, d
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones((slots, d)), "norm_affine")
        self.beta = self.add_param("beta", np.zeros((slots, d)), "norm_affine")
        self._buffers["running_mean"] = np.zeros(slots * d)
        self._buffers["running_var"] = np.ones(slots * d)
        self._buffers["num_batches"] = np.zeros(1)
        self._cache = None

    @property
    def running_mean(self):
        return self._buffers["running_mean"]

    @property
    def running_var(self):
        return self._buffers["running_var"]

    @property
    def fitted(self) -> bool:
        return self._buffers["num_batches"][0] > 0

    def mark_fitted(self):
        self._buffers["num_batches"][0] = max(1.0, self._buffers["num_batches"][0])

    def forward(self, x):
        if x.shape[1] != self.slots * self.d:
            raise DimensionError(f"{self.name}: width {x.shape[1]} != {self.slots}*{self.d}")
        gamma = self.gamma.value.reshape(-1)
        beta = self.beta.value.reshape(-1)
        if self.training:
            if x.shape[0] < 2:
                raise BatchSizeError(
                    f"{self.name}: batch norm in train mode needs B >= 2, got B={x.shape[0]}")
            mu = x.mean(axis=0)
            var = ((x - mu) ** 2).mean(axis=0)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1.0 - m) * mu
            self.running_var[...] = m * self.running_var + (1.0 - m) * var
            self._buffers["num_batches"][0] += 1
        else:
            if not self.fitted:
                raise StateError(f"{self.name}: running statistics were never fitted")
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std, self.training)
        return xhat * gamma + beta

    def backward(self, grad):
        self._require_forward()
        xhat, inv_std, training = self._cache
        self.gamma.grad += (grad * xhat).sum(axis=0).reshape(self.slots, self.d)
        self.beta.grad += grad.sum(axis=0).reshape(self.slots, self.d)
        g = grad * self.gamma.value.reshape(-1)
        if not training:
            return g * inv_std
        return _norm_backward(g, xhat, inv_std, axis=0)


class FeatureNormalization(Layer):
    """Batch norm on categorical-field slots, layer norm on numerical-field slots."""

    def __init__(self, schema: FeatureSchema, d: int, name: str = "norm"):
        super().__init__(name)
        self.d = d
        cat = schema.is_categorical
        self.cat_fields = [i for i, c in enumerate(cat) if c]
        self.num_fields = [i for i, c in enumerate(cat) if not c]
        self.cat_cols = _columns(self.cat_fields, d)
        self.num_cols = _columns(self.num_fields, d)
        self.bn = self.add_child(BatchNorm(len(self.cat_fields), d, f"{name}.bn")) \
            if self.cat_fields else None
        self.ln = self.add_child(LayerNorm(len(self.num_fields), d, f"{name}.ln")) \
            if self.num_fields else None
        self.width = len(cat) * d
        self._cache = None

    def forward(self, x):
        if x.shape[1] != self.width:
            raise DimensionError(f"{self.name}: width {x.shape[1]} != {self.width}")
        out = np.empty_like(x)
        if self.bn is not None:
            out[:, self.cat_cols] = self.bn.forward(x[:, self.cat_cols])
        if self.ln is not None:
            out[:, self.num_cols] = self.ln.forward(x[:, self.num_cols])
        self._cache = True
        return out

    def backward(self, grad):
        self._require_forward()
        dx = np.empty_like(grad)
        if self.bn is not None:
            dx[:, self.cat_cols] = self.bn.backward(grad[:, self.cat_cols])
        if self.ln is not None:
            dx[:, self.num_cols] = self.ln.backward(grad[:, self.num_cols])
        return dx


def _columns(fields, d):
    return np.asarray([i * d + k for i in fields for k in range(d)], dtype=np.int64)
