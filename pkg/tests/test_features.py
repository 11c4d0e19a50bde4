import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fibinetpp.errors import FitError, InputError, SchemaError
from fibinetpp.features import (CategoricalField, FeatureEmbedding, FeatureSchema, NumericalField,
                                RawInstance, embed_instance, encode, fit_minmax, fit_schema,
                                minmax_scale, read_vocabulary, write_vocabulary)


def mixed_schema():
    return FeatureSchema((NumericalField("x", 2.0, 6.0), CategoricalField("c", tokens=("a", "b"))))


class TestSchema:
    def test_needs_two_fields(self):
        with pytest.raises(SchemaError):
            FeatureSchema((NumericalField("x"),))

    def test_rejects_equal_bounds(self):
        with pytest.raises(SchemaError):
            NumericalField("x", 3.0, 3.0)

    def test_vocab_size_positive(self):
        with pytest.raises(SchemaError):
            CategoricalField("c", 0)

    def test_duplicate_names(self):
        with pytest.raises(SchemaError):
            FeatureSchema((CategoricalField("c"), CategoricalField("c")))

    def test_dict_round_trip(self):
        schema = mixed_schema()
        again = FeatureSchema.from_dict(schema.to_dict())
        assert again == schema and again.digest() == schema.digest()

    def test_feature_count(self):
        # 2 tokens + OOV row, plus one numerical feature
        assert mixed_schema().feature_count == 4


class TestMinmax:
    field = NumericalField("x", 2.0, 6.0)

    @pytest.mark.parametrize("x,expected", [(2.0, 0.0), (6.0, 1.0), (3.0, 0.25)])
    def test_examples(self, x, expected):
        assert minmax_scale(x, self.field) == expected

    def test_clamps_out_of_range(self):
        assert minmax_scale(-10.0, self.field) == 0.0
        assert minmax_scale(99.0, self.field) == 1.0

    def test_non_finite(self):
        with pytest.raises(InputError):
            minmax_scale(float("nan"), self.field)

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert minmax_scale(lo, self.field) <= minmax_scale(hi, self.field)


class TestFit:
    schema = FeatureSchema((NumericalField("x"), CategoricalField("c")))

    def rows(self, xs, cs=None):
        cs = cs or ["a"] * len(xs)
        return [RawInstance(0, (x, c)) for x, c in zip(xs, cs)]

    def test_minmax_values(self):
        fitted = fit_minmax(self.rows([2.0, 6.0, 3.0]), self.schema)
        assert (fitted.fields[0].x_min, fitted.fields[0].x_max) == (2.0, 6.0)

    def test_single_value(self):
        with pytest.raises(FitError):
            fit_minmax(self.rows([4.0, 4.0]), self.schema)

    def test_missing_excluded(self):
        fitted = fit_minmax(self.rows([5.0, None, 1.0]), self.schema)
        assert (fitted.fields[0].x_min, fitted.fields[0].x_max) == (1.0, 5.0)

    def test_all_missing(self):
        with pytest.raises(FitError):
            fit_minmax(self.rows([None, None]), self.schema)

    def test_empty(self):
        with pytest.raises(FitError):
            fit_schema([], self.schema)

    def test_vocabulary_order_and_min_freq(self):
        rows = self.rows([0.0, 1.0, 2.0, 3.0, 4.0], ["b", "a", "b", "z", "a"])
        fitted = fit_schema(rows, self.schema)
        assert fitted.fields[1].tokens == ("a", "b", "z")
        assert fit_schema(rows, self.schema, min_freq=2).fields[1].tokens == ("a", "b")

    def test_vocabulary_independent_of_row_order(self):
        rows = self.rows([0.0, 1.0, 2.0, 3.0], ["q", "p", "r", "p"])
        assert fit_schema(rows, self.schema) == fit_schema(rows[::-1], self.schema)

    def test_vocabulary_file(self, tmp_path):
        path = tmp_path / "vocab.txt"
        write_vocabulary(path, ("a", "b", "ünï"))
        assert read_vocabulary(path) == ("a", "b", "ünï")
        field = CategoricalField("c", tokens=read_vocabulary(path))
        assert [field.row_index(t) for t in ("a", "b", "ünï", "new")] == [1, 2, 3, 0]


class TestEmbedding:
    def table(self, d=2):
        table = FeatureEmbedding(mixed_schema(), d, np.random.default_rng(0))
        table.tables[0].value[0] = [1.0, 2.0]
        table.tables[1].value[1] = [0.1, 0.2]
        return table

    def test_lookup_copies_row(self):
        out = embed_instance(RawInstance(1, (2.0, "a")), self.table())
        assert out.shape == (1, 4)
        assert out[0, 2:].tolist() == [0.1, 0.2]

    def test_numerical_at_min_is_zero(self):
        out = embed_instance(RawInstance(1, (2.0, "a")), self.table())
        assert out[0, :2].tolist() == [0.0, 0.0]

    def test_numerical_scaling(self):
        out = embed_instance(RawInstance(1, (4.0, "a")), self.table())
        assert out[0, :2].tolist() == [0.5, 1.0]

    def test_missing_and_unseen(self):
        table = self.table()
        out = embed_instance(RawInstance(0, (None, "never")), table)
        assert out[0, :2].tolist() == [0.5, 1.0]
        assert np.array_equal(out[0, 2:], table.tables[1].value[0])

    def test_arity(self):
        with pytest.raises(SchemaError):
            embed_instance(RawInstance(0, (1.0,)), self.table())

    def test_init_bound(self):
        table = FeatureEmbedding(mixed_schema(), 16, np.random.default_rng(3))
        assert all(np.abs(t.value).max() <= 0.25 for t in table.tables)

    @given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 1000))
    def test_output_width(self, f, d, seed):
        schema = FeatureSchema.criteo_like(f // 2, f - f // 2, 3)
        schema = FeatureSchema(tuple(NumericalField(s.name, 0.0, 1.0)
                                     if isinstance(s, NumericalField) else s for s in schema))
        table = FeatureEmbedding(schema, d, np.random.default_rng(seed))
        rng = np.random.default_rng(seed)
        values = tuple(float(rng.random()) if isinstance(s, NumericalField) else "tok"
                       for s in schema)
        assert embed_instance(RawInstance(0, values), table).shape == (1, f * d)

    def test_gradient_touches_only_used_rows(self):
        schema = FeatureSchema((CategoricalField("a", 6), CategoricalField("b", 4)))
        table = FeatureEmbedding(schema, 3, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        ids = np.array([[1, 2], [4, 2], [1, 0]])
        batch = encode([], schema)
        batch.ids, batch.values = ids, np.ones(ids.shape)
        table.forward(batch)
        table.backward(rng.normal(size=(3, 6)))
        for i, param in enumerate(table.tables):
            used = set(ids[:, i].tolist())
            for row in range(param.value.shape[0]):
                assert bool(param.grad[row].any()) == (row in used)
            assert set(param.touched_rows.tolist()) == used
