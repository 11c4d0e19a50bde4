"""Field schema, vocabulary/min-max fitting and the embedding layer.

Categorical field ``i`` owns a table of ``vocab_size + 1`` rows; row 0 is the
out-of-vocabulary row. Numerical field ``i`` owns a single ``1 x d`` vector
that is scaled by the min-max normalized value of the field.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import FitError, InputError, SchemaError
from .tensor import Layer, uniform_init

MISSING = None
MISSING_NUMERIC_SCALED = 0.5


@dataclass(frozen=True)
class CategoricalField:
    name: str
    vocab_size: int = 1
    tokens: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(self.tokens))
            object.__setattr__(self, "vocab_size", max(1, len(self.tokens)))
        if self.vocab_size < 1:
            raise SchemaError(f"field {self.name!r}: vocab_size must be >= 1")

    kind = "categorical"

    @property
    def lookup(self) -> dict[str, int]:
        cached = self.__dict__.get("_lookup")
        if cached is None:
            cached = {tok: i + 1 for i, tok in enumerate(self.tokens or ())}
            object.__setattr__(self, "_lookup", cached)
        return cached

    def row_index(self, token) -> int:
        if token is MISSING:
            return 0
        return self.lookup.get(token, 0)


@dataclass(frozen=True)
class NumericalField:
    name: str
    x_min: float | None = None
    x_max: float | None = None

    kind = "numerical"

    def __post_init__(self):
        if (self.x_min is None) != (self.x_max is None):
            raise SchemaError(f"field {self.name!r}: x_min and x_max must be set together")
        if self.x_min is not None and not self.x_min < self.x_max:
            raise SchemaError(
                f"field {self.name!r}: x_min must be < x_max, got {self.x_min}, {self.x_max}")

    @property
    def fitted(self) -> bool:
        return self.x_min is not None


FieldSpec = Union[CategoricalField, NumericalField]


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.fields) < 2:
            raise SchemaError(f"a schema needs at least 2 fields, got {len(self.fields)}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in schema: {names}")

    def __len__(self):
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    @property
    def f(self) -> int:
        return len(self.fields)

    @property
    def is_categorical(self) -> list[bool]:
        return [isinstance(fs, CategoricalField) for fs in self.fields]

    @property
    def feature_count(self) -> int:
        """Total feature count ``t``: every categorical row plus one per numerical field."""
        return sum(fs.vocab_size + 1 if isinstance(fs, CategoricalField) else 1
                   for fs in self.fields)

    def to_dict(self) -> dict:
        out = []
        for fs in self.fields:
            if isinstance(fs, CategoricalField):
                out.append({"name": fs.name, "kind": "categorical", "vocab_size": fs.vocab_size,
                            "tokens": list(fs.tokens) if fs.tokens is not None else None})
            else:
                out.append({"name": fs.name, "kind": "numerical",
                            "x_min": fs.x_min, "x_max": fs.x_max})
        return {"fields": out}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSchema":
        fields = []
        for item in data["fields"]:
            if item["kind"] == "categorical":
                tokens = item.get("tokens")
                fields.append(CategoricalField(item["name"], int(item.get("vocab_size", 1)),
                                               tuple(tokens) if tokens is not None else None))
            elif item["kind"] == "numerical":
                fields.append(NumericalField(item["name"], item.get("x_min"), item.get("x_max")))
            else:
                raise SchemaError(f"unknown field kind {item['kind']!r}")
        return cls(tuple(fields))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def criteo_like(cls, num_numerical: int, num_categorical: int,
                    vocab_sizes: int | Sequence[int] = 1) -> "FeatureSchema":
        """Numerical fields first, then categorical ones, as in the Criteo TSV layout."""
        if isinstance(vocab_sizes, int):
            vocab_sizes = [vocab_sizes] * num_categorical
        fields = [NumericalField(f"I{i + 1}") for i in range(num_numerical)]
        fields += [CategoricalField(f"C{i + 1}", int(v)) for i, v in enumerate(vocab_sizes)]
        return cls(tuple(fields))


@dataclass(frozen=True)
class RawInstance:
    label: int
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))


def minmax_scale(x: float, spec: NumericalField) -> float:
    if not spec.fitted:
        raise SchemaError(f"field {spec.name!r} has no min-max statistics")
    x = float(x)
    if not math.isfinite(x):
        raise InputError(f"field {spec.name!r}: non-finite value {x}")
    scaled = (x - spec.x_min) / (spec.x_max - spec.x_min)
    return min(1.0, max(0.0, scaled))


def fit_schema(rows: Iterable[RawInstance], schema: FeatureSchema, *, vocabulary: bool = True,
               minmax: bool = True, min_freq: int = 1) -> FeatureSchema:
    """Single pass over training rows: vocabularies and/or min-max statistics.

    Vocabulary rows are ordered by descending count, ties broken by token, so
    the result does not depend on row order. Tokens seen fewer than
    ``min_freq`` times fall into the OOV row.
    """
    f = len(schema)
    counters = [Counter() for _ in range(f)]
    lo = [math.inf] * f
    hi = [-math.inf] * f
    n = 0
    for inst in rows:
        if len(inst.values) != f:
            raise SchemaError(f"instance arity {len(inst.values)} != schema arity {f}")
        n += 1
        for i, (spec, v) in enumerate(zip(schema.fields, inst.values)):
            if v is MISSING:
                continue
            if isinstance(spec, CategoricalField):
                if vocabulary:
                    counters[i][v] += 1
            elif minmax:
                v = float(v)
                if v < lo[i]:
                    lo[i] = v
                if v > hi[i]:
                    hi[i] = v
    if n == 0:
        raise FitError("cannot fit a schema on zero rows")

    fields = []
    for i, spec in enumerate(schema.fields):
        if isinstance(spec, CategoricalField) and vocabulary:
            kept = [tok for tok, c in counters[i].items() if c >= min_freq]
            kept.sort(key=lambda tok: (-counters[i][tok], tok))
            fields.append(replace(spec, tokens=tuple(kept)) if kept
                          else CategoricalField(spec.name, 1, ()))
        elif isinstance(spec, NumericalField) and minmax:
            if lo[i] == math.inf:
                raise FitError(f"field {spec.name!r}: every value is missing")
            if not lo[i] < hi[i]:
                raise FitError(f"field {spec.name!r}: x_min == x_max == {lo[i]}")
            fields.append(NumericalField(spec.name, lo[i], hi[i]))
        else:
            fields.append(spec)
    return FeatureSchema(tuple(fields))


def fit_minmax(rows: Iterable[RawInstance], schema: FeatureSchema) -> FeatureSchema:
    return fit_schema(rows, schema, vocabulary=False, minmax=True)


def write_vocabulary(path, tokens: Sequence[str]) -> None:
    """One token per line; line ``k`` (1-based) is embedding row ``k``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in tokens:
            if "\n" in tok or "\r" in tok:
                raise SchemaError(f"token {tok!r} contains a line break")
            fh.write(tok + "\n")


def read_vocabulary(path) -> tuple[str, ...]:
    with open(path, encoding="utf-8") as fh:
        return tuple(line.rstrip("\n") for line in fh)


@dataclass
class EncodedBatch:
    """Instances turned into arrays: row ids and min-max scaled values per field.

    ``ids[:, i]`` is meaningful for categorical fields, ``values[:, i]`` for
    numerical ones (scaled to [0, 1]).
    """

    ids: np.ndarray
    values: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return self.ids.shape[0]

    def take(self, index) -> "EncodedBatch":
        return EncodedBatch(self.ids[index], self.values[index],
                            None if self.labels is None else self.labels[index])


def encode(rows: Iterable[RawInstance], schema: FeatureSchema) -> EncodedBatch:
    f = len(schema)
    ids, vals, labels = [], [], []
    for inst in rows:
        if len(inst.values) != f:
            raise SchemaError(f"instance arity {len(inst.values)} != schema arity {f}")
        row_ids = [0] * f
        row_vals = [1.0] * f
        for i, (spec, v) in enumerate(zip(schema.fields, inst.values)):
            if isinstance(spec, CategoricalField):
                row_ids[i] = spec.row_index(v)
            else:
                row_vals[i] = MISSING_NUMERIC_SCALED if v is MISSING else minmax_scale(v, spec)
        ids.append(row_ids)
        vals.append(row_vals)
        labels.append(inst.label)
    return EncodedBatch(np.asarray(ids, dtype=np.int64).reshape(-1, f),
                        np.asarray(vals, dtype=np.float64).reshape(-1, f),
                        np.asarray(labels, dtype=np.float64))


class FeatureEmbedding(Layer):
    """Lookup (categorical) or scale (numerical) embeddings, concatenated by field.

    Input is an :class:`EncodedBatch`; output is ``B x (f*d)``. ``backward``
    scatters into the touched table rows only and returns ``None`` (the raw
    input is not differentiable).
    """

    def __init__(self, schema: FeatureSchema, d: int, rng: np.random.Generator,
                 name: str = "embedding", init: bool = True):
        super().__init__(name)
        self.schema, self.d = schema, d
        bound = 1.0 / np.sqrt(d)
        self.tables = []
        for spec in schema.fields:
            rows = spec.vocab_size + 1 if isinstance(spec, CategoricalField) else 1
            value = uniform_init(rng, (rows, d), bound) if init else np.zeros((rows, d))
            self.tables.append(self.add_param(spec.name, value, "embedding"))
        self._cat = schema.is_categorical
        self._cache = None

    def forward(self, batch: EncodedBatch):
        B, f, d = len(batch), len(self.schema), self.d
        if batch.ids.shape != (B, f):
            raise SchemaError(f"batch has {batch.ids.shape[1]} fields, schema has {f}")
        out = np.empty((B, f, d))
        for i, table in enumerate(self.tables):
            if self._cat[i]:
                out[:, i] = table.value[batch.ids[:, i]]
            else:
                out[:, i] = batch.values[:, i, None] * table.value[0]
        self._cache = batch
        return out.reshape(B, f * d)

    def backward(self, grad):
        self._require_forward()
        batch = self._cache
        g = grad.reshape(len(batch), len(self.schema), self.d)
        for i, table in enumerate(self.tables):
            if self._cat[i]:
                np.add.at(table.grad, batch.ids[:, i], g[:, i])
                rows = np.unique(batch.ids[:, i])
                table.touched_rows = rows if table.touched_rows is None else \
                    np.union1d(table.touched_rows, rows)
            else:
                table.grad[0] += batch.values[:, i] @ g[:, i]
        return None


def embed_instance(inst: RawInstance, table: FeatureEmbedding) -> np.ndarray:
    """Embedding of a single raw instance as a ``1 x (f*d)`` tensor."""
    if len(inst.values) != len(table.schema):
        raise SchemaError(
            f"instance arity {len(inst.values)} != schema arity {len(table.schema)}")
    return table.forward(encode([inst], table.schema))
