import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cofa.datamodel import (CATEGORICAL, NUMERIC, OTHER, ColumnSchema, CovariateSpec, Dataset, IngestionError,
                            SchemaError, SyntheticSpec, bucket_rare_levels, encode, generate_synthetic, load_csv,
                            load_schema, schema_from_dict, split_indices, split_train_test)
from cofa.pipeline import sample_paths

SCHEMA = schema_from_dict({
    "age": {"kind": "numeric"},
    "dx": {"kind": "categorical", "role": "cluster-target"},
    "readmit": {"kind": "binary-outcome", "role": "outcome"},
})


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def make(levels_counts, name="dx", extra_numeric=False):
    codes = np.concatenate([np.full(c, i) for i, c in enumerate(levels_counts)])
    n = len(codes)
    schema = [ColumnSchema(name, CATEGORICAL, "cluster-target"), ColumnSchema("y", "binary-outcome", "outcome")]
    data = {name: codes, "y": np.arange(n) % 2}
    if extra_numeric:
        schema.insert(0, ColumnSchema("x", NUMERIC))
        data["x"] = np.linspace(0, 1, n)
    levels = {name: tuple(f"L{i}" for i in range(len(levels_counts)))}
    return Dataset(schema, data, levels)


class TestLoadCsv:
    def test_three_rows_first_appearance_order(self, tmp_path):
        p = write(tmp_path, "age,dx,readmit\n70,F10,1\n55,A41,0\n61,F10,0\n")
        d = load_csv(p, SCHEMA)
        assert d.n_rows == 3
        assert d.levels["dx"] == ("F10", "A41")
        assert d["dx"].tolist() == [0, 1, 0]
        assert d["age"].tolist() == [70.0, 55.0, 61.0]

    def test_outcome_two_is_row_addressed(self, tmp_path):
        p = write(tmp_path, "age,dx,readmit\n70,F10,1\n55,A41,2\n")
        with pytest.raises(IngestionError) as err:
            load_csv(p, SCHEMA)
        assert err.value.row == 2 and err.value.column == "readmit"

    @pytest.mark.parametrize("cell", ["", "NA", "abc"])
    def test_bad_numeric_cell(self, tmp_path, cell):
        p = write(tmp_path, f"age,dx,readmit\n70,F10,1\n{cell},A41,0\n")
        with pytest.raises(IngestionError) as err:
            load_csv(p, SCHEMA)
        assert err.value.row == 2 and err.value.column == "age"

    def test_missing_column_is_schema_error(self, tmp_path):
        p = write(tmp_path, "age,readmit\n70,1\n")
        with pytest.raises(SchemaError):
            load_csv(p, SCHEMA)

    def test_comment_lines_skipped(self, tmp_path):
        p = write(tmp_path, "# provenance line\nage,dx,readmit\n70,F10,1\n")
        assert load_csv(p, SCHEMA).n_rows == 1

    def test_sample_fixture_has_34_target_levels(self):
        data, schema = sample_paths()
        d = load_csv(data, load_schema(schema))
        assert len(d.levels[d.target_name]) == 34
        assert OTHER in d.levels[d.target_name]
        assert d.level_counts(d.target_name).min() >= 100

    def test_csv_round_trip(self, tmp_path):
        d = generate_synthetic(SyntheticSpec(200, 5, [0, 0, 1, 1, 2], [0.1, 0.2, 0.3],
                                             [CovariateSpec("age", "normal", {"mean": 50, "sd": 10}, 0.01)],
                                             seed=3))
        p = tmp_path / "out.csv"
        d.to_csv(p, comment="x")
        back = load_csv(p, d.schema)
        np.testing.assert_array_equal(back["age"], d["age"])
        assert back.labels("dx") == d.labels("dx")

    def test_schema_validation(self):
        with pytest.raises(SchemaError):
            schema_from_dict({"a": {"kind": "numeric"}, "y": {"kind": "binary-outcome", "role": "outcome"}})
        with pytest.raises(SchemaError):
            schema_from_dict([{"name": "a", "kind": "numeric", "role": "cluster-target"},
                              {"name": "y", "kind": "binary-outcome", "role": "outcome"}])

    def test_schema_file(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"columns": [{"name": "dx", "kind": "categorical", "role": "cluster-target"},
                                             {"name": "y", "kind": "binary-outcome", "role": "outcome"}]}))
        assert [c.name for c in load_schema(p)] == ["dx", "y"]


class TestBucketing:
    def test_99_is_bucketed_100_is_kept(self):
        d = make([150, 99, 100])
        b = bucket_rare_levels(d, "dx", 100)
        assert b.levels["dx"] == ("L0", "L2", OTHER)
        assert b.level_counts("dx").tolist() == [150, 100, 99]

    def test_no_rare_levels_is_identity(self):
        d = make([100, 120])
        b = bucket_rare_levels(d, "dx", 100)
        assert b is d
        assert OTHER not in b.levels["dx"]

    def test_existing_other_is_reused(self):
        d = make([200, 10, 150])
        d = d.with_column(d.column_schema("dx"), d["dx"], ("A", "B", OTHER))
        b = bucket_rare_levels(d, "dx", 100)
        assert b.levels["dx"] == ("A", OTHER)
        assert b.level_counts("dx").tolist() == [200, 160]

    def test_numeric_column_is_type_error(self):
        d = make([10, 10], extra_numeric=True)
        with pytest.raises(TypeError):
            bucket_rare_levels(d, "x")

    @given(st.lists(st.integers(0, 30), min_size=2, max_size=8), st.integers(1, 25))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_row_preserving(self, counts, min_count):
        if sum(counts) == 0:
            counts[0] = 1
        d = make(counts)
        once = bucket_rare_levels(d, "dx", min_count)
        twice = bucket_rare_levels(once, "dx", min_count)
        assert once.n_rows == d.n_rows == twice.n_rows
        assert once.levels == twice.levels
        np.testing.assert_array_equal(once["dx"], twice["dx"])
        kept = [lv for lv, c in zip(once.levels["dx"], once.level_counts("dx")) if lv != OTHER]
        assert all(c >= min_count for lv, c in zip(once.levels["dx"], once.level_counts("dx")) if lv in kept)


class TestEncode:
    def test_most_frequent_is_reference(self):
        codes = np.array([0] * 5 + [1] * 3 + [2] * 2)
        schema = [ColumnSchema("c", CATEGORICAL), ColumnSchema("dx", CATEGORICAL, "cluster-target"),
                  ColumnSchema("y", "binary-outcome", "outcome")]
        d = Dataset(schema, {"c": codes, "dx": np.zeros(10, int), "y": np.arange(10) % 2},
                    {"c": ("A", "B", "C"), "dx": ("z",)})
        X = encode(d)
        assert X.feature_names == ("c=B", "c=C")
        assert X.X.sum(axis=0).tolist() == [3, 2]

    def test_tie_goes_to_dictionary_order(self):
        d = make([4, 4, 2])
        X = encode(d, include=("dx",))
        assert X.feature_names == ("dx=L1", "dx=L2")

    def test_numeric_only(self):
        d = make([3, 3], extra_numeric=True)
        X = encode(d)
        assert X.feature_names == ("x",)
        np.testing.assert_array_equal(X.X[:, 0], d["x"])

    def test_34_level_target_gives_33_indicators(self):
        data, schema = sample_paths()
        d = load_csv(data, load_schema(schema))
        X = encode(d, include=(d.target_name,))
        assert sum(n.startswith(d.target_name + "=") for n in X.feature_names) == 33

    def test_indicator_sums_equal_level_counts(self):
        d = make([7, 3, 9, 1])
        X = encode(d, include=("dx",))
        counts = d.level_counts("dx")
        for i, name in enumerate(d.levels["dx"]):
            if f"dx={name}" in X.feature_names:
                assert X.column(f"dx={name}").sum() == counts[i]
        assert set(np.unique(X.X)) <= {0.0, 1.0}

    def test_group_labels_default_to_target(self):
        d = make([2, 3])
        X = encode(d)
        np.testing.assert_array_equal(X.group_labels, d["dx"])

    def test_encoding_reused_on_held_out_rows(self):
        d = make([5, 5, 5])
        X = encode(d, include=("dx",))
        held = encode(d.take([0, 7, 14]), encoding=X.encoding)
        np.testing.assert_array_equal(held.X, X.X[[0, 7, 14]])


class TestSplit:
    def test_sizes_ten_rows(self):
        tr, te = split_indices(10, 0.8, 0)
        assert (len(tr), len(te)) == (8, 2)

    def test_sizes_cohort(self):
        tr, te = split_indices(17093, 0.8, 0)
        assert (len(tr), len(te)) == (13674, 3419)

    def test_deterministic(self):
        d = make([30, 30])
        a, b = split_train_test(d, 0.8, 5)
        c, e = split_train_test(d, 0.8, 5)
        np.testing.assert_array_equal(a["dx"], c["dx"])
        np.testing.assert_array_equal(b["y"], e["y"])

    def test_empty_side_is_error(self):
        with pytest.raises(ValueError):
            split_indices(2, 0.9, 0)
        with pytest.raises(ValueError):
            split_indices(10, 1.0, 0)

    @given(st.integers(2, 500), st.floats(0.05, 0.95), st.integers(0, 2**31))
    @settings(max_examples=80, deadline=None)
    def test_partition(self, n, frac, seed):
        try:
            tr, te = split_indices(n, frac, seed)
        except ValueError:
            return
        assert len(np.intersect1d(tr, te)) == 0
        np.testing.assert_array_equal(np.sort(np.concatenate([tr, te])), np.arange(n))


class TestSynthetic:
    def test_group_rates(self):
        d = generate_synthetic(SyntheticSpec(100_000, 6, [0, 0, 1, 1, 2, 2], [0.17, 0.33, 0.10], seed=1))
        g = np.array([0, 0, 1, 1, 2, 2])[d["dx"]]
        for k, rate in enumerate([0.17, 0.33, 0.10]):
            assert abs(d.outcome[g == k].mean() - rate) < 0.01

    def test_single_level_half(self):
        d = generate_synthetic(SyntheticSpec(100_000, 1, [0], [0.5], seed=2))
        assert abs(d.outcome.mean() - 0.5) < 0.01

    def test_zero_coefficient_covariate_independent(self):
        from scipy.stats import chi2_contingency
        spec = SyntheticSpec(20_000, 2, [0, 1], [0.2, 0.2],
                             [CovariateSpec("flag", "bernoulli", {"p": 0.4}, 0.0)], seed=3)
        d = generate_synthetic(spec)
        table = np.histogram2d(d["flag"], d.outcome, bins=2)[0]
        assert chi2_contingency(table)[1] > 0.001

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(500, 4, [0, 0, 1, 1], [0.1, 0.3], seed=9)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        np.testing.assert_array_equal(a.outcome, b.outcome)
        np.testing.assert_array_equal(a["dx"], b["dx"])

    def test_per_group_coefficients_and_categorical(self):
        spec = SyntheticSpec(50_000, 2, [0, 1], [0.3, 0.3],
                             [CovariateSpec("x", "normal", {"mean": 0, "sd": 1}, [2.0, -2.0]),
                              CovariateSpec("ins", "categorical", {"probs": [0.5, 0.5]}, [0.0, 0.0])],
                             seed=4)
        d = generate_synthetic(spec)
        g = d["dx"]
        hi = d["x"] > 0
        assert d.outcome[(g == 0) & hi].mean() > d.outcome[(g == 0) & ~hi].mean() + 0.2
        assert d.outcome[(g == 1) & hi].mean() < d.outcome[(g == 1) & ~hi].mean() - 0.2
        assert d.levels["ins"] == ("ins0", "ins1")

    @pytest.mark.parametrize("kwargs", [
        dict(group_event_rates=[0.0, 0.5]),
        dict(planted_groups=[0, 0, 2]),
        dict(level_weights=[1.0, -1.0, 1.0]),
        dict(planted_groups=[0, 1]),
    ])
    def test_spec_validation(self, kwargs):
        base = dict(n_rows=10, n_levels=3, planted_groups=[0, 1, 1], group_event_rates=[0.2, 0.4])
        base.update(kwargs)
        with pytest.raises(ValueError):
            SyntheticSpec(**base)

    def test_spec_dict_round_trip(self):
        spec = SyntheticSpec(10, 3, [0, 1, 1], [0.2, 0.4],
                             [CovariateSpec("x", "poisson", {"lam": 2}, 0.1)], seed=1)
        again = SyntheticSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()
