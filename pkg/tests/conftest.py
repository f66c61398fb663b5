import numpy as np
import pytest

from xpeffects.ingest import EncodedTable


def make_table(columns, **data):
    return EncodedTable.from_columns(columns, data)


@pytest.fixture
def d1():
    """Two arms, two rows each: control y = 1, 3 and treated y = 2, 6."""
    return make_table([("a", "treatment"), ("y", "kpi")],
                      a=["ctl", "ctl", "trt", "trt"], y=[1, 3, 2, 6])


@pytest.fixture
def d2():
    """Saturated 2x2 design with cell effects 1 (x=a) and 3 (x=b)."""
    return make_table([("a", "treatment"), ("x", "categorical"), ("y", "kpi")],
                      a=["ctl", "trt", "ctl", "trt"], x=["a", "a", "b", "b"], y=[0, 1, 0, 3])


@pytest.fixture
def wald():
    return make_table([("a", "treatment"), ("z", "instrument"), ("y", "kpi")],
                      a=["0", "1", "1", "1"], z=["0", "0", "1", "1"], y=[0, 1, 2, 3])


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
