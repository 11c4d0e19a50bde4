"""Squeeze-and-excitation blocks.

``SENetPlus`` is the bit-wise variant: grouped (max, mean) squeeze, two
bias-free FC layers (ReLU then identity), element-wise re-weighting and a
skip connection followed by a per-field layer norm. ``SENet`` is the
field-wise original that pools each embedding to one mean value.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError
from .normalization import LayerNorm
from .tensor import Layer, Linear, ReLU, Sequential


def hidden_width(inputs: int, r: float) -> int:
    """Width of the thin excitation layer: ``ceil(inputs / r)``, at least 1."""
    if r <= 0:
        raise ConfigError(f"reduction ratio must be positive, got {r}")
    return max(1, math.ceil(inputs / r))


def squeeze(v, f: int, d: int, g: int):
    """Per field and per group of ``d/g`` slots emit (max, mean); ``B x 2gf``."""
    if d % g:
        raise ConfigError(f"embedding size d={d} is not divisible by group count g={g}")
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    grouped = v.reshape(v.shape[0], f, g, d // g)
    return np.stack([grouped.max(axis=-1), grouped.mean(axis=-1)], axis=-1).reshape(v.shape[0], -1)


def excite(Z, W_2, W_3):
    """``A = W_3 relu(W_2 Z)`` for row-vector batches ``Z``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    W_2, W_3 = np.asarray(W_2, dtype=np.float64), np.asarray(W_3, dtype=np.float64)
    if W_2.shape[1] != Z.shape[1] or W_3.shape[1] != W_2.shape[0]:
        raise DimensionError(f"excite shape mismatch: Z {Z.shape}, W_2 {W_2.shape}, W_3 {W_3.shape}")
    return np.maximum(Z @ W_2.T, 0.0) @ W_3.T


def reweight(A, v):
    A, v = np.asarray(A, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if A.shape != v.shape:
        raise DimensionError(f"reweight shape mismatch: {A.shape} vs {v.shape}")
    return A * v


class Squeeze(Layer):
    def __init__(self, f: int, d: int, g: int, name: str = "squeeze"):
        super().__init__(name)
        if g < 1 or d % g:
            raise ConfigError(f"embedding size d={d} is not divisible by group count g={g}")
        self.f, self.d, self.g, self.k = f, d, g, d // g
        self._cache = None

    def forward(self, x):
        if x.shape[1] != self.f * self.d:
            raise DimensionError(f"{self.name}: width {x.shape[1]} != {self.f}*{self.d}")
        grouped = x.reshape(x.shape[0], self.f, self.g, self.k)
        # argmax returns the first maximal slot: ties route gradient there
        arg = grouped.argmax(axis=-1)
        zmax = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]
        zavg = grouped.mean(axis=-1)
        self._cache = (arg, x.shape[0])
        return np.stack([zmax, zavg], axis=-1).reshape(x.shape[0], -1)

    def backward(self, grad):
        self._require_forward()
        arg, B = self._cache
        g = grad.reshape(B, self.f, self.g, 2)
        dx = np.repeat(g[..., 1:2] / self.k, self.k, axis=-1)
        np.put_along_axis(dx, arg[..., None],
                          np.take_along_axis(dx, arg[..., None], axis=-1) + g[..., 0:1], axis=-1)
        return dx.reshape(B, self.f * self.d)

    def activation_pattern(self):
        return self._cache[0]



class Excitation(Sequential):
    """``Z -> W_3 relu(W_2 Z)``; both layers bias-free."""

    def __init__(self, n_in: int, n_out: int, r: float, rng: np.random.Generator,
                 name: str = "excite", out_relu: bool = False):
        self.hidden = hidden_width(n_in, r)
        layers = [Linear(n_in, self.hidden, rng, name=f"{name}.W2", bias=False, component="excitation"),
                  ReLU(f"{name}.relu1"),
                  Linear(self.hidden, n_out, rng, name=f"{name}.W3", bias=False, component="excitation")]
        if out_relu:
            layers.append(ReLU(f"{name}.relu2"))
        super().__init__(layers, name)


class SENetPlus(Layer):
    """Squeeze, excite, re-weight and fuse; ``B x fd -> B x fd``."""

    def __init__(self, f: int, d: int, g: int, r: float, rng: np.random.Generator,
                 name: str = "senet_plus"):
        super().__init__(name)
        self.f, self.d = f, d
        self.squeeze = self.add_child(Squeeze(f, d, g, f"{name}.squeeze"))
        self.excite = self.add_child(Excitation(2 * g * f, f * d, r, rng, f"{name}.excite"))
        self.fuse_ln = self.add_child(LayerNorm(f, d, f"{name}.fuse_ln"))
        self._cache = None

    def forward(self, x):
        A = self.excite.forward(self.squeeze.forward(x))
        self._cache = (x, A)
        return self.fuse_ln.forward(x + A * x)

    def backward(self, grad):
        self._require_forward()
        x, A = self._cache
        ds = self.fuse_ln.backward(grad)
        dx = ds * (1.0 + A)
        dx += self.squeeze.backward(self.excite.backward(ds * x))
        return dx


def fuse(v_orig, v_weighted, fuse_ln: LayerNorm):
    """Skip connection then per-field layer norm."""
    v_orig, v_weighted = np.atleast_2d(v_orig), np.atleast_2d(v_weighted)
    if v_orig.shape != v_weighted.shape:
        raise DimensionError(f"fuse shape mismatch: {v_orig.shape} vs {v_weighted.shape}")
    return fuse_ln.forward(v_orig + v_weighted)


class SENet(Layer):
    """Field-wise SENet: mean-pool per field, FC-ReLU-FC-ReLU, scale each field.

    ``force_unit_weights`` bypasses the FC layers (every field weight is 1);
    it exists for tests.
    """

    def __init__(self, f: int, d: int, r: float, rng: np.random.Generator, name: str = "senet"):
        super().__init__(name)
        self.f, self.d = f, d
        self.excite = self.add_child(Excitation(f, f, r, rng, f"{name}.excite", out_relu=True))
        self.force_unit_weights = False
        self._cache = None

    def forward(self, x):
        B = x.shape[0]
        v = x.reshape(B, self.f, self.d)
        if self.force_unit_weights:
            a = np.ones((B, self.f))
        else:
            a = self.excite.forward(v.mean(axis=-1))
        self._cache = (v, a)
        return (v * a[..., None]).reshape(B, -1)

    def backward(self, grad):
        self._require_forward()
        v, a = self._cache
        B = v.shape[0]
        g = grad.reshape(B, self.f, self.d)
        dv = g * a[..., None]
        if not self.force_unit_weights:
            da = (g * v).sum(axis=-1)
            dz = self.excite.backward(da)
            dv += dz[..., None] / self.d
        return dv.reshape(B, -1)
