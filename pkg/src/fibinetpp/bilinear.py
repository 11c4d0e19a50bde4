"""Bi-linear field interactions.

``bilinear_hadamard`` keeps a d-vector per field pair (the FiBiNet form);
``bilinear_inner`` collapses each pair to one scalar, and a bias-free linear
compression maps the ``f(f-1)/2`` scalars down to ``m`` values.
"""
from __future__ import annotations

import enum
from itertools import combinations

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Layer, Linear, uniform_init


class BilinearFieldType(str, enum.Enum):
    FIELD_ALL = "field_all"
    FIELD_EACH = "field_each"
    FIELD_INTERACTION = "field_interaction"


def _check_pair(v_i, v_j, W):
    v_i, v_j, W = (np.asarray(a, dtype=np.float64) for a in (v_i, v_j, W))
    d = v_i.shape[-1]
    if v_j.shape[-1] != d or W.shape != (d, d):
        raise DimensionError(f"bilinear shape mismatch: v_i {v_i.shape}, v_j {v_j.shape}, W {W.shape}")
    return v_i, v_j, W


def bilinear_hadamard(v_i, v_j, W):
    v_i, v_j, W = _check_pair(v_i, v_j, W)
    return (v_i @ W) * v_j


def bilinear_inner(v_i, v_j, W) -> float:
    v_i, v_j, W = _check_pair(v_i, v_j, W)
    return float(np.dot(v_i @ W, v_j))


def field_pairs(f: int) -> tuple[np.ndarray, np.ndarray]:
    """Left and right field indices of all pairs ``i < j`` in lexicographic order."""
    pairs = list(combinations(range(f), 2))
    left = np.asarray([p[0] for p in pairs], dtype=np.int64)
    right = np.asarray([p[1] for p in pairs], dtype=np.int64)
    return left, right


class _BilinearBase(Layer):
    """Shared projection ``v_i W`` for every field pair.

    The weight is stored as one 2-D parameter of stacked ``d x d`` blocks:
    1 block (field_all), ``f`` blocks (field_each, indexed by the left field)
    or ``f(f-1)/2`` blocks (field_interaction, indexed by pair).
    """

    def __init__(self, f: int, d: int, field_type, rng: np.random.Generator, name: str,
                 init: bool = True):
        super().__init__(name)
        try:
            self.field_type = BilinearFieldType(field_type)
        except ValueError:
            raise ConfigError(f"unknown bilinear field type {field_type!r}") from None
        if f < 2:
            raise ConfigError(f"bilinear interactions need f >= 2, got {f}")
        self.f, self.d = f, d
        self.left, self.right = field_pairs(f)
        self.n_pairs = len(self.left)
        blocks = {BilinearFieldType.FIELD_ALL: 1, BilinearFieldType.FIELD_EACH: f,
                  BilinearFieldType.FIELD_INTERACTION: self.n_pairs}[self.field_type]
        shape = (blocks * d, d)
        value = uniform_init(rng, shape, 1.0 / np.sqrt(d)) if init else np.zeros(shape)
        self.W = self.add_param("W", value, "bilinear_ws")
        self._cache = None

    def _pair_weights(self):
        blocks = self.W.value.reshape(-1, self.d, self.d)
        if self.field_type is BilinearFieldType.FIELD_ALL:
            return np.broadcast_to(blocks, (self.n_pairs, self.d, self.d))
        if self.field_type is BilinearFieldType.FIELD_EACH:
            return blocks[self.left]
        return blocks

    def _project(self, x):
        B = x.shape[0]
        if x.shape[1] != self.f * self.d:
            raise DimensionError(f"{self.name}: width {x.shape[1]} != {self.f}*{self.d}")
        v = x.reshape(B, self.f, self.d)
        lhs = v[:, self.left].transpose(1, 0, 2)            # p x B x d
        rhs = v[:, self.right].transpose(1, 0, 2)
        Wp = self._pair_weights()
        proj = np.matmul(lhs, Wp)                           # p x B x d
        self._cache = (lhs, rhs, proj, Wp, B)
        return proj, rhs

    def _backward_pairs(self, dproj, drhs):
        lhs, rhs, proj, Wp, B = self._cache
        dlhs = np.matmul(dproj, Wp.transpose(0, 2, 1))
        dWp = np.matmul(lhs.transpose(0, 2, 1), dproj)     # p x d x d
        gW = self.W.grad.reshape(-1, self.d, self.d)
        if self.field_type is BilinearFieldType.FIELD_ALL:
            gW[0] += dWp.sum(axis=0)
        elif self.field_type is BilinearFieldType.FIELD_EACH:
            np.add.at(gW, self.left, dWp)
        else:
            gW += dWp
        dv = np.zeros((B, self.f, self.d))
        np.add.at(dv, (slice(None), self.left), dlhs.transpose(1, 0, 2))
        np.add.at(dv, (slice(None), self.right), drhs.transpose(1, 0, 2))
        return dv.reshape(B, self.f * self.d)


class BilinearHadamard(_BilinearBase):
    """All-pairs ``(v_i W) * v_j``, output ``B x (f(f-1)/2 * d)``."""

    def forward(self, x):
        proj, rhs = self._project(x)
        return (proj * rhs).transpose(1, 0, 2).reshape(x.shape[0], -1)

    def backward(self, grad):
        self._require_forward()
        lhs, rhs, proj, Wp, B = self._cache
        g = grad.reshape(B, self.n_pairs, self.d).transpose(1, 0, 2)
        return self._backward_pairs(g * rhs, g * proj)


class BilinearInner(_BilinearBase):
    """All-pairs scalar ``(v_i W) . v_j``, output ``B x f(f-1)/2`` (the vector P)."""

    def forward(self, x):
        proj, rhs = self._project(x)
        return np.sum(proj * rhs, axis=-1).T

    def backward(self, grad):
        self._require_forward()
        lhs, rhs, proj, Wp, B = self._cache
        g = grad.T[:, :, None]                              # p x B x 1
        return self._backward_pairs(g * rhs, g * proj)


def interaction_vector(v_norm, layer: BilinearInner):
    """P for a single normalized embedding row ``1 x (f*d)``."""
    return layer.forward(np.atleast_2d(np.asarray(v_norm, dtype=np.float64)))


def compression_layer(n_pairs: int, m: int, rng: np.random.Generator, name: str = "compress"):
    """Bias-free linear map ``P -> W_1 P`` with ``W_1`` of shape ``m x n_pairs``; no activation."""
    if m < 1:
        raise ConfigError(f"compression size m must be >= 1, got {m}")
    return Linear(n_pairs, m, rng, name=name, bias=False, component="compression_layer")


def compress(P, W_1):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    W_1 = np.atleast_2d(np.asarray(W_1, dtype=np.float64))
    if W_1.shape[1] != P.shape[1]:
        raise DimensionError(f"compress shape mismatch: P {P.shape}, W_1 {W_1.shape}")
    return P @ W_1.T


class BilinearPlus(Layer):
    """Interaction vector followed by the compression layer: ``x -> H^CML``."""

    def __init__(self, f: int, d: int, m: int, field_type, rng: np.random.Generator,
                 name: str = "bilinear_plus", init: bool = True):
        super().__init__(name)
        self.inner = self.add_child(BilinearInner(f, d, field_type, rng, f"{name}.bilinear", init))
        self.compress = self.add_child(compression_layer(self.inner.n_pairs, m, rng,
                                                         f"{name}.compress"))
        self._cache = None

    def forward(self, x):
        self._cache = True
        return self.compress.forward(self.inner.forward(x))

    def backward(self, grad):
        self._require_forward()
        return self.inner.backward(self.compress.backward(grad))
