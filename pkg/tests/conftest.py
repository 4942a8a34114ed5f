import json
from pathlib import Path

import numpy as np
import pytest

from nashmeta.data import DatasetSpec, builtin_spec

DATA = Path(__file__).parent / "data"


@pytest.fixture
def tiny_spec(tmp_path) -> DatasetSpec:
    doc = {
        "name": "tiny",
        "path": str(DATA / "tiny.csv"),
        "label": "outcome",
        "favorable": "yes",
        "sensitive": "sex",
        "categorical": ["color", "sex"],
        "test_fraction": 0.1,
        "test_cell_count": 2,
        "val_cell_count": 2,
        "seed": 3,
    }
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    return DatasetSpec.from_json(p)


@pytest.fixture(scope="session")
def titanic_spec() -> DatasetSpec:
    spec = DatasetSpec.from_json(builtin_spec("titanic"))
    spec.path = str(DATA / "titanic.csv")
    return spec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n:>2}: {detail}")
