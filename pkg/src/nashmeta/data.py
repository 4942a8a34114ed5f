"""CSV ingestion, one-hot encoding and group/label-balanced splitting."""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MISSING_CATEGORY = "<missing>"
DATA_DIR_ENV = "NASHMETA_DATA_DIR"
CONFIG_DIR = Path(__file__).parent / "configs"


class DataError(ValueError):
    pass


@dataclass
class DatasetSpec:
    path: str
    label: str
    favorable: str
    sensitive: str
    categorical: list = field(default_factory=list)
    drop: list = field(default_factory=list)
    na_values: list = field(default_factory=lambda: [""])
    missing: str = "reject"
    sensitive_threshold: float | None = None
    label_threshold: float | None = None
    delimiter: str = ","
    test_fraction: float = 0.03
    test_cell_count: int | None = None
    val_cell_count: int = 1
    seed: int = 0
    name: str = ""
    train: dict = field(default_factory=dict)
    base_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.val_cell_count < 1:
            raise DataError("val_cell_count must be >= 1")
        if self.missing not in ("reject", "impute"):
            raise DataError("missing must be 'reject' or 'impute'")

    @classmethod
    def from_json(cls, path) -> "DatasetSpec":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"dataset spec not found: {path}") from None
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON ({e})") from None
        doc.setdefault("base_dir", str(path.parent))
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"{path}: unknown spec keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def resolve_path(self) -> Path:
        p = Path(self.path)
        if p.is_absolute():
            return p
        candidates = []
        if os.environ.get(DATA_DIR_ENV):
            candidates.append(Path(os.environ[DATA_DIR_ENV]) / p)
        if self.base_dir:
            candidates.append(Path(self.base_dir) / p)
        candidates.append(p)
        for c in candidates:
            if c.exists():
                return c
        return candidates[0]


def builtin_spec(name: str) -> Path:
    """Path of a shipped dataset spec (``titanic``, ``adult_sex``, ...)."""
    p = CONFIG_DIR / f"{name}.json"
    if not p.exists():
        names = sorted(q.stem for q in CONFIG_DIR.glob("*.json"))
        raise DataError(f"no shipped spec {name!r}; available: {', '.join(names)}")
    return p


@dataclass
class RawTable:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    feature_names: list


def _parse_float(text, row, col):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def load_csv(spec: DatasetSpec) -> RawTable:
    """Read the CSV named by ``spec`` and one-hot encode its categorical columns.

    Row numbers in errors are 1-based data rows (the header is row 0).
    """
    path = spec.resolve_path()
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=spec.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for col in [spec.label, spec.sensitive, *spec.categorical, *spec.drop]:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    idx = {c: i for i, c in enumerate(header)}
    na = set(spec.na_values)
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {r}: expected {len(header)} fields, got {len(row)}")

    def cell(row_i, col):
        return rows[row_i][idx[col]]

    n = len(rows)
    y = np.empty(n, dtype=np.int64)
    groups = []
    for i in range(n):
        lab = cell(i, spec.label)
        if lab in na:
            raise DataError(f"row {i + 1}, column {spec.label!r}: missing label")
        if spec.label_threshold is not None:
            lab = "high" if _parse_float(lab, i + 1, spec.label) >= spec.label_threshold else "low"
        y[i] = 1 if lab == str(spec.favorable) else 0
        s = cell(i, spec.sensitive)
        if s in na:
            raise DataError(f"row {i + 1}, column {spec.sensitive!r}: missing sensitive attribute")
        if spec.sensitive_threshold is not None:
            v = _parse_float(s, i + 1, spec.sensitive)
            s = f">{spec.sensitive_threshold:g}" if v > spec.sensitive_threshold else f"<={spec.sensitive_threshold:g}"
        groups.append(s)

    skip = {spec.label, *spec.drop}
    if spec.sensitive_threshold is not None:
        skip.add(spec.sensitive)
    blocks, names = [], []
    for col in header:
        if col in skip:
            continue
        values = [cell(i, col) for i in range(n)]
        missing = [i for i, v in enumerate(values) if v in na]
        if missing and spec.missing == "reject":
            raise DataError(f"row {missing[0] + 1}, column {col!r}: missing value")
        if col in spec.categorical:
            values = [MISSING_CATEGORY if v in na else v for v in values]
            cats = sorted(set(values))
            pos = {c: k for k, c in enumerate(cats)}
            block = np.zeros((n, len(cats)))
            block[np.arange(n), [pos[v] for v in values]] = 1.0
            blocks.append(block)
            names.extend(f"{col}={c}" for c in cats)
        else:
            col_vals = np.array([math.nan if v in na else _parse_float(v, i + 1, col)
                                 for i, v in enumerate(values)])
            blocks.append(col_vals[:, None])
            names.append(col)
    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return RawTable(X=X, y=y, groups=np.array(groups, dtype=object), feature_names=names)


@dataclass
class GroupedDataset:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    group_names: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    feature_names: list
    warnings: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def group_ids(self, idx=None) -> np.ndarray:
        g = self.groups if idx is None else self.groups[idx]
        lookup = {name: k for k, name in enumerate(self.group_names)}
        return np.array([lookup[v] for v in g], dtype=np.int64)

    def val_groups(self) -> list:
        """Validation index arrays, one per group in ``group_names`` order."""
        return [self.val_idx[self.groups[self.val_idx] == g] for g in self.group_names]

    def cell_counts(self, idx) -> dict:
        return {(g, int(lab)): int(np.sum((self.groups[idx] == g) & (self.y[idx] == lab)))
                for g in self.group_names for lab in (1, 0)}


def test_cell_size(spec: DatasetSpec, n_rows: int, n_groups: int) -> int:
    if spec.test_cell_count is not None:
        return int(spec.test_cell_count)
    return int(math.floor(spec.test_fraction * n_rows / (2 * n_groups)))


def balanced_split(table: RawTable, spec: DatasetSpec, groups=None) -> GroupedDataset:
    """Sample balanced test cells, then balanced validation cells; the rest trains.

    Cells are visited in (sorted group, label 1 then 0) order with one seeded
    generator, so the split depends only on ``(table, spec)``.
    """
    names = sorted(set(table.groups.tolist()))
    if groups is not None:
        absent = [g for g in groups if g not in names]
        if absent:
            raise DataError(f"group(s) {absent} have no rows")
        names = list(groups)
    if not names:
        raise DataError("no groups in table")
    n_test = test_cell_size(spec, len(table.y), len(names))
    n_val = spec.val_cell_count
    rng = np.random.default_rng(spec.seed)
    test, val, notes = [], [], []
    taken = np.zeros(len(table.y), dtype=bool)
    for g in names:
        for lab in (1, 0):
            cell = np.flatnonzero((table.groups == g) & (table.y == lab))
            cell = rng.permutation(cell)
            if len(cell) < n_test + n_val:
                msg = (f"cell (group={g!r}, label={lab}) has {len(cell)} rows, "
                       f"needs {n_test} test + {n_val} validation; filled to its maximum")
                notes.append(msg)
                warnings.warn(msg, stacklevel=2)
            t = cell[:n_test]
            v = cell[n_test:n_test + n_val]
            test.extend(t.tolist())
            val.extend(v.tolist())
            taken[t] = True
            taken[v] = True
    train = np.flatnonzero(~taken & np.isin(table.groups, names))
    if train.size == 0:
        msg = "training split is empty"
        notes.append(msg)
        warnings.warn(msg, stacklevel=2)
    return GroupedDataset(
        X=table.X,
        y=table.y,
        groups=table.groups,
        group_names=names,
        train_idx=train,
        val_idx=np.sort(np.array(val, dtype=np.int64)),
        test_idx=np.sort(np.array(test, dtype=np.int64)),
        feature_names=list(table.feature_names),
        warnings=notes,
    )


def standardize(ds: GroupedDataset) -> GroupedDataset:
    """Affine-scale every feature with train-split statistics.

    Train-constant features become all-zero; missing numeric entries land on
    the train mean, i.e. 0.
    """
    if ds.train_idx.size == 0:
        raise DataError("cannot standardize with an empty training split")
    train = ds.X[ds.train_idx]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(train, axis=0)
        std = np.nanstd(train, axis=0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    constant = ~(std > 0)
    scale = np.where(constant, 0.0, 1.0 / np.where(constant, 1.0, std))
    X = (ds.X - mean) * scale
    X[np.isnan(X)] = 0.0
    return replace(ds, X=X)


def load_dataset(spec: DatasetSpec) -> GroupedDataset:
    return standardize(balanced_split(load_csv(spec), spec))
