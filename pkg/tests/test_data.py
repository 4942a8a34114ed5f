import json

import numpy as np
import pytest

from nashmeta.data import (
    DataError,
    DatasetSpec,
    RawTable,
    balanced_split,
    builtin_spec,
    load_csv,
    load_dataset,
    standardize,
    test_cell_size as cell_size,
)


def write(tmp_path, text, **overrides):
    (tmp_path / "d.csv").write_text(text)
    doc = {"path": "d.csv", "label": "y", "favorable": "1", "sensitive": "s", "categorical": ["c"]}
    doc.update(overrides)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(doc))
    return DatasetSpec.from_json(p)


def test_two_category_one_hot(tmp_path):
    spec = write(tmp_path, "c,y\nb,1\na,0\n", sensitive="c")
    t = load_csv(spec)
    assert t.feature_names == ["c=a", "c=b"]
    assert t.X.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert t.y.tolist() == [1, 0]


def test_missing_label_error_names_row(tmp_path):
    spec = write(tmp_path, "c,s,y\nb,m,1\na,f,\n")
    with pytest.raises(DataError, match="row 2.*'y'"):
        load_csv(spec)


def test_unparseable_and_missing_values(tmp_path):
    spec = write(tmp_path, "c,s,x,y\nb,m,oops,1\n", categorical=["c", "s"])
    with pytest.raises(DataError, match="row 1, column 'x'"):
        load_csv(spec)
    spec = write(tmp_path, "c,s,x,y\nb,m,,1\n", categorical=["c", "s"])
    with pytest.raises(DataError, match="missing value"):
        load_csv(spec)
    spec = write(tmp_path, "c,s,x,y\n,m,,1\n", categorical=["c", "s"], missing="impute")
    t = load_csv(spec)
    assert "c=<missing>" in t.feature_names and np.isnan(t.X[0, t.feature_names.index("x")])


def test_missing_column(tmp_path):
    spec = write(tmp_path, "c,s,y\nb,m,1\n", categorical=["nope"])
    with pytest.raises(DataError, match="'nope'"):
        load_csv(spec)


def test_spec_validation(tmp_path):
    with pytest.raises(DataError):
        write(tmp_path, "c,s,y\n", test_fraction=1.5)
    with pytest.raises(DataError):
        write(tmp_path, "c,s,y\n", val_cell_count=0)
    with pytest.raises(DataError):
        write(tmp_path, "c,s,y\n", bogus=1)


def test_titanic_feature_count_and_table_cells(titanic_spec):
    t = load_csv(titanic_spec)
    assert t.X.shape == (1309, 1526)
    ds = balanced_split(t, titanic_spec)
    assert ds.cell_counts(ds.test_idx) == {("female", 1): 9, ("female", 0): 9, ("male", 1): 9, ("male", 0): 9}
    assert set(ds.cell_counts(ds.val_idx).values()) == {1}
    assert not ds.warnings


def test_formula_reproduces_table_test_cells():
    spec = DatasetSpec(path="x", label="y", favorable="1", sensitive="s")
    assert cell_size(spec, 1309, 2) == 9
    assert cell_size(spec, 48842, 2) == 366
    assert cell_size(spec, 48842, 5) == 146
    small = DatasetSpec(path="x", label="y", favorable="1", sensitive="s", test_fraction=0.1)
    assert cell_size(small, 649, 2) == 16


def test_split_invariants_and_determinism(tiny_spec):
    t = load_csv(tiny_spec)
    a = balanced_split(t, tiny_spec)
    b = balanced_split(t, tiny_spec)
    for name in ("train_idx", "val_idx", "test_idx"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    parts = [set(a.train_idx), set(a.val_idx), set(a.test_idx)]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert set().union(*parts) == set(range(len(t.y)))
    assert set(a.cell_counts(a.test_idx).values()) == {2}
    assert set(a.cell_counts(a.val_idx).values()) == {2}


def test_underfilled_cells_warn():
    t = RawTable(X=np.arange(4.0)[:, None], y=np.array([1, 0, 1, 0]),
                 groups=np.array(["a", "a", "b", "b"], dtype=object), feature_names=["x"])
    spec = DatasetSpec(path="x", label="y", favorable="1", sensitive="s", test_cell_count=1,
                       val_cell_count=1)
    with pytest.warns(UserWarning):
        ds = balanced_split(t, spec)
    assert ds.train_idx.size == 0
    assert any("empty" in w for w in ds.warnings)
    spec = DatasetSpec(path="x", label="y", favorable="1", sensitive="s", test_cell_count=0,
                       val_cell_count=1)
    with pytest.warns(UserWarning, match="training split is empty"):
        ds = balanced_split(t, spec)
    assert ds.val_idx.size == 4
    with pytest.raises(DataError):
        balanced_split(t, spec, groups=["a", "b", "c"])


def test_standardize_examples():
    t = RawTable(X=np.array([[0.0, 5.0], [2.0, 5.0], [7.0, 1.0]]), y=np.array([1, 0, 1]),
                 groups=np.array(["a", "a", "a"], dtype=object), feature_names=["x", "k"])
    spec = DatasetSpec(path="x", label="y", favorable="1", sensitive="s", test_cell_count=1,
                       val_cell_count=1)
    with pytest.warns(UserWarning):
        ds = balanced_split(t, spec)
    ds.train_idx = np.array([0, 1])
    ds.val_idx = np.array([], dtype=np.int64)
    ds.test_idx = np.array([2])
    s = standardize(ds)
    assert s.X[[0, 1], 0].tolist() == [-1.0, 1.0]
    assert np.all(s.X[:, 1] == 0.0)
    again = standardize(s)
    assert np.allclose(again.X, s.X, atol=1e-12)


def test_no_leakage(tiny_spec):
    ds = balanced_split(load_csv(tiny_spec), tiny_spec)
    base = standardize(ds).X[ds.train_idx]
    ds.X = ds.X.copy()
    ds.X[ds.test_idx[0]] += 1000.0
    assert np.array_equal(standardize(ds).X[ds.train_idx], base)


def test_shipped_specs_load():
    for name in ("titanic", "adult_sex", "adult_race", "bank", "credit", "communities", "student"):
        spec = DatasetSpec.from_json(builtin_spec(name))
        assert {"lr", "dropout", "batch_size"} <= set(spec.train)
    assert DatasetSpec.from_json(builtin_spec("bank")).train == {"lr": 0.001, "dropout": 0.3, "batch_size": 512}
    with pytest.raises(DataError):
        builtin_spec("mnist")


def test_load_dataset_nan_free(titanic_spec):
    ds = load_dataset(titanic_spec)
    assert np.all(np.isfinite(ds.X))
