import hashlib

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import OneHotEncoder

from fibinetpp.data import (SyntheticSpec, format_row, generate_synthetic, ingest, load_oracle,
                            parse_row, sidecar_path, write_tsv)
from fibinetpp.errors import IngestError, InputError, SchemaError
from fibinetpp.features import (CategoricalField, FeatureSchema, MISSING, NumericalField,
                                encode, fit_schema)
from fibinetpp.models import ModelHyper, build
from fibinetpp.training import TrainConfig, auc, evaluate, split_dataset, train

ONE_EACH = FeatureSchema((NumericalField("I1"), CategoricalField("C1")))


class TestParse:
    def test_example(self):
        inst = parse_row("1\t0.5\ttokA", ONE_EACH)
        assert inst.label == 1 and inst.values == (0.5, "tokA")

    def test_missing_numeric(self):
        assert parse_row("0\t\ttokA", ONE_EACH).values == (MISSING, "tokA")

    @pytest.mark.parametrize("line", ["1\t0.5", "2\t0.5\ta", "1\tabc\ta", "1\tnan\ta",
                                      "1\t0.5\ta\tb"])
    def test_malformed(self, line):
        with pytest.raises(InputError):
            parse_row(line, ONE_EACH)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class TestIngest:
    def test_one_bad_row_in_ten_thousand(self, tmp_path):
        lines = [f"{i % 2}\t{i * 0.25}\ttok{i % 7}" for i in range(10_000)]
        lines[4321] = "1\tnot-a-number\ttok"
        write_lines(tmp_path / "d.tsv", lines)
        reader = ingest(tmp_path / "d.tsv", ONE_EACH)
        rows = list(reader)
        assert len(rows) == 9_999 and reader.skipped == 1
        assert reader.first_bad[0] == 4322

    def test_too_many_bad_rows(self, tmp_path):
        write_lines(tmp_path / "d.tsv", ["1\t1\ta"] * 98 + ["x"] * 2)
        with pytest.raises(IngestError, match=r"d\.tsv.*line 99"):
            list(ingest(tmp_path / "d.tsv", ONE_EACH))

    def test_unreadable(self, tmp_path):
        with pytest.raises(IngestError, match="cannot read"):
            list(ingest(tmp_path / "missing.tsv", ONE_EACH))

    def test_reserialize_is_lossless(self, tmp_path):
        lines = ["1\t0.5\ttokA", "0\t\ttokB", "0\t3\t", "1\t-2.75\tü", "0\t1e-07\tx",
                 "1\t123456789\ty"]
        write_lines(tmp_path / "in.tsv", lines)
        rows = list(ingest(tmp_path / "in.tsv", ONE_EACH))
        write_tsv(tmp_path / "out.tsv", rows, ONE_EACH)
        assert (tmp_path / "out.tsv").read_bytes() == (tmp_path / "in.tsv").read_bytes()

    def test_synthetic_file_round_trip(self, tmp_path):
        spec = SyntheticSpec(n_rows=300, seed=3)
        rows, _ = generate_synthetic(spec, tmp_path / "s.tsv")
        again = list(ingest(tmp_path / "s.tsv", spec.schema()))
        assert again == rows
        assert "\n".join(format_row(r, spec.schema()) for r in again) + "\n" == \
            (tmp_path / "s.tsv").read_text(encoding="utf-8")


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSynthetic:
    def test_byte_identical(self, tmp_path):
        spec = SyntheticSpec(n_rows=2000, seed=11)
        generate_synthetic(spec, tmp_path / "a.tsv")
        generate_synthetic(spec, tmp_path / "b.tsv")
        assert digest(tmp_path / "a.tsv") == digest(tmp_path / "b.tsv")
        assert (sidecar_path(tmp_path / "a.tsv").read_bytes()
                == sidecar_path(tmp_path / "b.tsv").read_bytes())
        generate_synthetic(SyntheticSpec(n_rows=2000, seed=12), tmp_path / "c.tsv")
        assert digest(tmp_path / "a.tsv") != digest(tmp_path / "c.tsv")

    def test_sidecar_oracle_matches(self, tmp_path):
        rows, oracle = generate_synthetic(SyntheticSpec(n_rows=200, seed=2), tmp_path / "s.tsv")
        loaded = load_oracle(tmp_path / "s.tsv")
        assert np.array_equal(loaded.score_rows(rows), oracle.score_rows(rows))

    def test_pure_noise(self):
        rows, oracle = generate_synthetic(SyntheticSpec(n_rows=50_000, noise=float("inf")))
        y = [r.label for r in rows]
        assert abs(np.mean(y) - 0.5) < 0.01
        # the oracle scores every row 0.5, so AUC sits at exactly one half
        assert abs(auc(y, oracle.score_rows(rows)) - 0.5) <= 0.02

    def test_xor_pair_defeats_linear_models(self):
        spec = SyntheticSpec(f_cat=4, f_num=0, vocab_size=10, n_rows=50_000, seed=5,
                             pairs=[(1, 2)], interaction_weight=3.0, linear_scale=0.0)
        rows, oracle = generate_synthetic(spec)
        train_rows, val_rows, _ = split_dataset(rows, 0)
        y_val = [r.label for r in val_rows]
        assert auc(y_val, oracle.score_rows(val_rows)) > 0.75
        onehot = OneHotEncoder(handle_unknown="ignore").fit([r.values for r in train_rows])
        logistic = LogisticRegression(max_iter=1000).fit(
            onehot.transform([r.values for r in train_rows]), [r.label for r in train_rows])
        scores = logistic.predict_proba(onehot.transform([r.values for r in val_rows]))[:, 1]
        assert abs(auc(y_val, scores) - 0.5) < 0.03

    def test_linear_signal_is_learnt_by_dnn(self):
        spec = SyntheticSpec(f_cat=4, f_num=2, vocab_size=10, n_rows=20_000, seed=8,
                             pairs=[], linear_scale=1.0)
        rows, oracle = generate_synthetic(spec)
        tr, va, _ = split_dataset(rows, 0)
        schema = fit_schema(tr, spec.schema())
        model = build("dnn", schema, ModelHyper(d=4, mlp=(32,)), seed=0)
        result = train(model, encode(tr, schema), encode(va, schema),
                       TrainConfig(lr=1e-2, batch_size=256, epochs=10, patience=2))
        oracle_auc = auc([r.label for r in va], oracle.score_rows(va))
        assert result.best_val.auc >= oracle_auc - 0.01
        assert evaluate(model, encode(va, schema)).auc == result.best_val.auc

    def test_pairs_presets(self):
        adjacent = SyntheticSpec(f_cat=5, f_num=1).planted_pairs()
        assert [(i, j) for i, j, _ in adjacent] == [(1, 2), (3, 4)]
        assert len(SyntheticSpec(f_cat=5, f_num=1, pairs="all").planted_pairs()) == 10
        assert SyntheticSpec(pairs=[(2, 3, -0.5)]).planted_pairs() == [(2, 3, -0.5)]

    @pytest.mark.parametrize("pairs", [[(0, 2)], [(2, 2)], [(2, 99)], "some", [(1,)]])
    def test_bad_pairs(self, pairs):
        with pytest.raises(SchemaError):
            generate_synthetic(SyntheticSpec(n_rows=10, pairs=pairs))

    def test_traits_are_balanced_signs(self):
        _, oracle = generate_synthetic(SyntheticSpec(n_rows=10, vocab_size=7))
        for i, traits in enumerate(oracle.traits):
            if traits is not None:
                assert sorted(set(traits)) == [-1.0, 1.0] and sum(traits) == 1.0
