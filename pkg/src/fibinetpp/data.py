"""Criteo-style TSV ingestion and a synthetic generator with planted pair interactions.

TSV layout: label, then one column per schema field in schema order; an empty
column is a missing value.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import IngestError, InputError, SchemaError
from .features import (CategoricalField, FeatureSchema, NumericalField, RawInstance,
                       MISSING)
from .tensor import sigmoid


class Ingest:
    """Streaming reader over a TSV file.

    Iterating yields :class:`RawInstance` objects. Malformed rows are skipped
    and counted; once the file is exhausted an :class:`IngestError` is raised
    if the skipped fraction exceeds ``max_bad_fraction``.
    """

    def __init__(self, path, schema: FeatureSchema, max_bad_fraction: float = 0.001):
        self.path = Path(path)
        self.schema = schema
        self.max_bad_fraction = max_bad_fraction
        self.rows_read = 0
        self.skipped = 0
        self.first_bad: tuple[int, str] | None = None

    def __iter__(self) -> Iterator[RawInstance]:
        try:
            fh = open(self.path, encoding="utf-8", newline="")
        except OSError as exc:
            raise IngestError(f"cannot read {self.path}: {exc}") from None
        with fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                self.rows_read += 1
                try:
                    yield parse_row(line, self.schema)
                except InputError as exc:
                    self.skipped += 1
                    if self.first_bad is None:
                        self.first_bad = (lineno, str(exc))
        if self.rows_read and self.skipped > self.max_bad_fraction * self.rows_read:
            lineno, why = self.first_bad
            raise IngestError(f"{self.path}: {self.skipped} of {self.rows_read} rows malformed "
                              f"(limit {self.max_bad_fraction:.4%}); first at line {lineno}: {why}")


def ingest(path, schema: FeatureSchema, max_bad_fraction: float = 0.001) -> Ingest:
    return Ingest(path, schema, max_bad_fraction)


def parse_row(line: str, schema: FeatureSchema) -> RawInstance:
    cols = line.split("\t")
    if len(cols) != 1 + len(schema):
        raise InputError(f"expected {1 + len(schema)} columns, found {len(cols)}")
    if cols[0] not in ("0", "1"):
        raise InputError(f"label must be 0 or 1, found {cols[0]!r}")
    values = []
    for spec, raw in zip(schema.fields, cols[1:]):
        if raw == "":
            values.append(MISSING)
        elif isinstance(spec, NumericalField):
            try:
                x = float(raw)
            except ValueError:
                raise InputError(f"field {spec.name!r}: {raw!r} is not a number") from None
            if not math.isfinite(x):
                raise InputError(f"field {spec.name!r}: non-finite value {raw!r}")
            values.append(x)
        else:
            values.append(raw)
    return RawInstance(int(cols[0]), tuple(values))


def format_number(x: float) -> str:
    """Integral values print without a fraction (Criteo style), others via ``repr``."""
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def format_row(inst: RawInstance, schema: FeatureSchema) -> str:
    cols = [str(inst.label)]
    for spec, v in zip(schema.fields, inst.values):
        if v is MISSING:
            cols.append("")
        elif isinstance(spec, NumericalField):
            cols.append(format_number(float(v)))
        else:
            cols.append(str(v))
    return "\t".join(cols)


def write_tsv(path, rows: Iterable[RawInstance], schema: FeatureSchema) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in rows:
            fh.write(format_row(inst, schema) + "\n")
            n += 1
    return n


@dataclass
class SyntheticSpec:
    """Generative recipe: per-category biases, numerical slopes and planted pairs.

    The logit is ``intercept + sum(category bias) + sum(slope * (2 x/scale - 1))
    + sum over planted pairs (i, j) of weight * trait_i * trait_j`` divided by
    ``noise``; each category carries a hidden +/-1 trait. Pairs index schema
    fields (numerical fields come first) and must both be categorical.
    ``pairs=None`` plants disjoint consecutive pairs over the categorical fields,
    ``pairs="all"`` every categorical pair. A pair may carry its own weight as
    a third entry ``(i, j, w)``; otherwise ``interaction_weight`` is used.
    """

    f_cat: int = 6
    f_num: int = 2
    vocab_size: int = 20
    n_rows: int = 50_000
    seed: int = 0
    pairs: list | str | None = None
    interaction_weight: float = 1.5
    linear_scale: float = 0.5
    intercept: float = 0.0
    noise: float = 1.0
    numeric_scale: float = 100.0

    def schema(self) -> FeatureSchema:
        return FeatureSchema.criteo_like(self.f_num, self.f_cat, self.vocab_size)

    def planted_pairs(self) -> list[tuple[int, int, float]]:
        """``(i, j, weight)`` triples."""
        cat = list(range(self.f_num, self.f_num + self.f_cat))
        if self.pairs is None:
            pairs = [(cat[k], cat[k + 1]) for k in range(0, len(cat) - 1, 2)]
        elif self.pairs == "all":
            pairs = [(a, b) for n, a in enumerate(cat) for b in cat[n + 1:]]
        elif isinstance(self.pairs, str):
            raise SchemaError(f"unknown pair preset {self.pairs!r}")
        else:
            pairs = self.pairs
        out = []
        for p in pairs:
            if len(p) not in (2, 3):
                raise SchemaError(f"planted pair {p!r} must be (i, j) or (i, j, weight)")
            w = float(p[2]) if len(p) == 3 else self.interaction_weight
            out.append((int(p[0]), int(p[1]), w))
        return out


@dataclass
class SyntheticOracle:
    """True ``P(y=1 | x)`` of a synthetic dataset."""

    schema: FeatureSchema
    biases: list
    traits: list
    slopes: list
    pairs: list
    intercept: float
    noise: float
    numeric_scale: float

    def logit(self, values: Sequence) -> float:
        z = self.intercept
        cat_index = {}
        for i, (spec, v) in enumerate(zip(self.schema.fields, values)):
            if isinstance(spec, CategoricalField):
                k = _token_index(spec.name, v)
                cat_index[i] = k
                z += self.biases[i][k]
            else:
                z += self.slopes[i] * (2.0 * float(v) / self.numeric_scale - 1.0)
        for i, j, w in self.pairs:
            z += w * self.traits[i][cat_index[i]] * self.traits[j][cat_index[j]]
        if math.isinf(self.noise):
            return 0.0
        return z / self.noise

    def score(self, inst: RawInstance) -> float:
        return float(sigmoid(self.logit(inst.values)))

    def score_rows(self, rows: Iterable[RawInstance]) -> np.ndarray:
        return sigmoid(np.asarray([self.logit(r.values) for r in rows], dtype=np.float64))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schema"] = self.schema.to_dict()
        out["pairs"] = [list(p) for p in self.pairs]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticOracle":
        data = dict(data)
        data["schema"] = FeatureSchema.from_dict(data["schema"])
        data["pairs"] = [tuple(p) for p in data["pairs"]]
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def _token(field_name: str, k: int) -> str:
    return f"{field_name}_{k}"


def _token_index(field_name: str, token) -> int:
    prefix = field_name + "_"
    if not isinstance(token, str) or not token.startswith(prefix):
        raise SchemaError(f"token {token!r} was not produced for field {field_name!r}")
    return int(token[len(prefix):])


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def generate_synthetic(spec: SyntheticSpec, path=None):
    """Sample a dataset; returns ``(rows, oracle)`` and writes TSV + sidecar if ``path`` is given.

    Everything is drawn from one PCG64 stream seeded with ``spec.seed``.
    """
    schema = spec.schema()
    pairs = spec.planted_pairs()
    for i, j, _ in pairs:
        if not (0 <= i < len(schema) and 0 <= j < len(schema)):
            raise SchemaError(f"planted pair ({i}, {j}) is outside the {len(schema)} fields")
        if not (isinstance(schema.fields[i], CategoricalField)
                and isinstance(schema.fields[j], CategoricalField)) or i == j:
            raise SchemaError(f"planted pair ({i}, {j}) must join two distinct categorical fields")
    rng = np.random.default_rng(spec.seed)
    f = len(schema)
    biases, traits, slopes = [None] * f, [None] * f, [0.0] * f
    for i, fs in enumerate(schema.fields):
        if isinstance(fs, CategoricalField):
            v = fs.vocab_size
            signs = np.where(np.arange(v) < (v + 1) // 2, 1.0, -1.0)
            traits[i] = rng.permutation(signs).tolist()
            biases[i] = (rng.standard_normal(v) * spec.linear_scale).tolist()
        else:
            slopes[i] = float(rng.standard_normal() * spec.linear_scale)
    oracle = SyntheticOracle(schema, biases, traits, slopes, pairs, spec.intercept, spec.noise,
                             spec.numeric_scale)

    columns = []
    for fs in schema.fields:
        if isinstance(fs, CategoricalField):
            columns.append(rng.integers(0, fs.vocab_size, size=spec.n_rows))
        else:
            columns.append(np.round(rng.uniform(0.0, spec.numeric_scale, size=spec.n_rows), 2))
    u = rng.random(spec.n_rows)
    rows = []
    for r in range(spec.n_rows):
        values = tuple(_token(fs.name, int(col[r])) if isinstance(fs, CategoricalField)
                       else float(col[r]) for fs, col in zip(schema.fields, columns))
        p = float(sigmoid(oracle.logit(values)))
        rows.append(RawInstance(int(u[r] < p), values))

    if path is not None:
        write_tsv(path, rows, schema)
        meta = {"spec": asdict(spec), "oracle": oracle.to_dict()}
        with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return rows, oracle


def load_oracle(data_path) -> SyntheticOracle:
    with open(sidecar_path(data_path), encoding="utf-8") as fh:
        return SyntheticOracle.from_dict(json.load(fh)["oracle"])
