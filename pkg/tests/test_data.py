import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetpfl.data import (
    CsvSchema, Dataset, LatentDataset, SplitSpec, generate_synthetic, load_csv, minibatches,
    partition_dirichlet, partition_indices, sample_synthetic, split, split_indices, write_csv,
)
from hetpfl.errors import ContractError, ParseError, PartitionError, SchemaError


def class_fraction_gap(parts):
    fr = [(d.labels.mean(), d.sensitive.mean()) for d in parts]
    return max(abs(a[i] - b[i]) for a, b in itertools.combinations(fr, 2) for i in range(2))


# --- synthetic generator ----------------------------------------------------


def test_synthetic_shape_and_totals():
    parts = generate_synthetic(5000, 3, 5.0, seed=0)
    assert len(parts) == 3
    assert sum(len(p) for p in parts) == 5000
    for p in parts:
        assert p.n_features == 3  # two non-sensitive features plus the sensitive bit
        assert set(np.unique(p.labels)) == {0, 1} and set(np.unique(p.sensitive)) == {0, 1}
        np.testing.assert_array_equal(p.features[:, 2], p.sensitive)


def test_synthetic_sensitive_correlation():
    ds = sample_synthetic(200_000, np.random.default_rng(0))
    corr = np.corrcoef(ds.labels, ds.sensitive)[0, 1]
    assert corr == pytest.approx(0.4, abs=0.01)


def test_near_iid_partition_at_high_concentration():
    gaps = [class_fraction_gap(generate_synthetic(5000, 3, 1000.0, s)) for s in range(10)]
    assert max(gaps) <= 0.05


def test_skewed_partition_at_low_concentration():
    gaps = [class_fraction_gap(generate_synthetic(5000, 3, 0.1, s)) for s in range(10)]
    assert sum(g >= 0.2 for g in gaps) >= 8


def test_synthetic_deterministic():
    a = generate_synthetic(1000, 3, 2.0, 7)
    b = generate_synthetic(1000, 3, 2.0, 7)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_synthetic_preconditions():
    with pytest.raises(ContractError):
        generate_synthetic(299, 3, 1.0, 0)
    with pytest.raises(ContractError):
        generate_synthetic(1000, 3, 0.0, 0)


# --- partition --------------------------------------------------------------


def test_partition_balanced_at_high_concentration():
    ds = sample_synthetic(2000, np.random.default_rng(0))
    for seed in range(10):
        idx = partition_indices(ds, 2, 1000.0, seed)
        for c in (0, 1):
            total = (ds.labels == c).sum()
            for part in idx:
                assert abs((ds.labels[part] == c).sum() / total - 0.5) <= 0.05


def test_partition_requires_two_clients():
    ds = sample_synthetic(500, np.random.default_rng(0))
    with pytest.raises(ContractError):
        partition_dirichlet(ds, 1, 1.0, 0)


def test_partition_unsatisfiable_raises():
    ds = sample_synthetic(60, np.random.default_rng(0))
    with pytest.raises(PartitionError):
        partition_dirichlet(ds, 5, 1.0, 0)


@given(seed=st.integers(0, 10_000), k=st.integers(2, 4), conc=st.floats(0.3, 100))
def test_partition_is_exact_set_partition(seed, k, conc):
    ds = sample_synthetic(800, np.random.default_rng(seed))
    idx = partition_indices(ds, k, conc, seed)
    assert sorted(np.concatenate(idx).tolist()) == list(range(len(ds)))
    for part in idx:
        assert len(part) >= 20
        assert len(set(ds.labels[part])) == 2


def test_partition_deterministic():
    ds = sample_synthetic(800, np.random.default_rng(3))
    a = partition_indices(ds, 3, 0.5, 11)
    b = partition_indices(ds, 3, 0.5, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# --- split ------------------------------------------------------------------


def test_split_sizes_for_1000():
    ds = sample_synthetic(1000, np.random.default_rng(0))
    tr, va, te = split(ds, SplitSpec(seed=0))
    assert (len(tr), len(va), len(te)) == (630, 70, 300)


def test_split_same_seed_identical():
    ds = sample_synthetic(500, np.random.default_rng(0))
    a = split_indices(ds, SplitSpec(seed=3))
    b = split_indices(ds, SplitSpec(seed=3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_split_single_group_is_rejected():
    x = np.zeros((10, 2))
    ds = Dataset(x, np.array([0, 1] * 5), np.zeros(10, dtype=int))
    with pytest.raises(PartitionError):
        split(ds, SplitSpec())


@given(n=st.integers(60, 600), seed=st.integers(0, 1000))
def test_split_is_exact_and_proportional(n, seed):
    ds = sample_synthetic(n, np.random.default_rng(seed))
    if not ds.has_both_groups():
        return
    tr, va, te = split_indices(ds, SplitSpec(seed=seed))
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(n))
    # stratified allocation rounds once per (label, group) cell
    assert abs(len(te) - 0.3 * n) <= 4
    assert abs(len(va) - 0.07 * n) <= 4
    assert set(ds.sensitive[tr]) == {0, 1}


def test_split_spec_validation():
    with pytest.raises(ContractError):
        SplitSpec(test_fraction=1.5)
    with pytest.raises(ContractError):
        SplitSpec(train_val_ratio=(9, 0))


# --- mini-batches -----------------------------------------------------------


@given(n=st.integers(10, 400), bs=st.integers(2, 128), seed=st.integers(0, 100))
def test_minibatches_cover_once_and_hold_both_groups(n, bs, seed):
    a = np.array([0, 1] + [seed % 2] * (n - 2))
    batches = minibatches(a, bs, np.random.default_rng(seed))
    assert sorted(np.concatenate(batches).tolist()) == list(range(n))
    for b in batches:
        assert set(a[b]) == {0, 1}


# --- CSV --------------------------------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


SCHEMA = CsvSchema.from_dict(
    {"label": {"column": "y", "positive": "yes"}, "sensitive": {"column": "sex", "positive": "F"}, "features": ["f"]}
)


def test_csv_binarises_and_standardises(tmp_path):
    p = _write(tmp_path / "d.csv", "f,sex,y\n1,F,yes\n2,M,no\n3,F,no\n4,M,yes\n")
    ds = load_csv(p, SCHEMA)
    assert ds.labels.tolist() == [1, 0, 0, 1]
    assert ds.sensitive.tolist() == [1, 0, 1, 0]
    col = ds.features[:, 0]
    assert abs(col.mean()) <= 1e-9 and abs(col.var() - 1) <= 1e-9
    np.testing.assert_allclose(col, (np.arange(1, 5) - 2.5) / np.sqrt(1.25))


def test_csv_missing_column(tmp_path):
    p = _write(tmp_path / "d.csv", "f,y\n1,yes\n")
    with pytest.raises(SchemaError, match="sex"):
        load_csv(p, SCHEMA)


def test_csv_non_numeric_reports_row(tmp_path):
    p = _write(tmp_path / "d.csv", "f,sex,y\n1,F,yes\n2,M,no\noops,F,no\n")
    with pytest.raises(ParseError, match="row 2"):
        load_csv(p, SCHEMA)


def test_csv_constant_column_warns(tmp_path):
    p = _write(tmp_path / "d.csv", "f,sex,y\n5,F,yes\n5,M,no\n")
    with pytest.warns(UserWarning, match="constant"):
        ds = load_csv(p, SCHEMA)
    assert ds.features[:, 0].tolist() == [0.0, 0.0]


def test_csv_rows_with_missing_values_dropped(tmp_path):
    p = _write(tmp_path / "d.csv", "f,sex,y\n1,F,yes\n,M,no\n3,M,no\n")
    with pytest.warns(UserWarning, match="dropped 1"):
        ds = load_csv(p, SCHEMA)
    assert len(ds) == 2


def test_csv_categorical_one_hot(tmp_path):
    schema = CsvSchema.from_dict(
        {"label": {"column": "y", "positive": "1"}, "sensitive": {"column": "s", "positive": "1"},
         "features": [], "categorical": {"c": ["a", "b", "z"]}}
    )
    p = _write(tmp_path / "d.csv", "c,s,y\na,1,1\nz,0,0\nb,1,0\n")
    ds = load_csv(p, schema)
    assert ds.features.tolist() == [[1, 0, 0], [0, 0, 1], [0, 1, 0]]


def test_schema_file_round_trip(tmp_path):
    doc = {"label": {"column": "y", "positive": "1"}, "sensitive": {"column": "s", "positive": "1"}, "features": ["a"]}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert CsvSchema.load(tmp_path / "s.json").features == ("a",)
    with pytest.raises(SchemaError):
        CsvSchema.from_dict({"label": {"column": "y"}})


@given(seed=st.integers(0, 500))
def test_csv_round_trip_standardises(tmp_path_factory, seed):
    ds = sample_synthetic(120, np.random.default_rng(seed))
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    write_csv(ds, path, ["x0", "x1", "a"])
    schema = CsvSchema.from_dict(
        {"label": {"column": "label", "positive": "1"}, "sensitive": {"column": "sensitive", "positive": "1"}, "features": ["x0", "x1"]}
    )
    back = load_csv(path, schema)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert np.all(np.abs(back.features.mean(axis=0)) <= 1e-9)
    assert np.all(np.abs(back.features.var(axis=0) - 1) <= 1e-9)


# --- containers -------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), np.array([0, 1, 0]))
    with pytest.raises(ContractError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]), np.array([1]))
    with pytest.raises(ContractError):
        LatentDataset(np.zeros((2, 4)), np.array([0, 1]), np.array([0]))
