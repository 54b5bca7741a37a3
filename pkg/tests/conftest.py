import datetime as dt

import numpy as np
import pytest

from sarwarn.stack_io import LINEAR, RasterStack

_ACCEPTANCE = []


def daily(n, start=dt.date(2020, 1, 1), step=12):
    return tuple(start + dt.timedelta(days=step * i) for i in range(n))


def make_stack(cube, bands=("VV",), unit=LINEAR, start=dt.date(2020, 1, 1)):
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim == 3:
        cube = cube[:, None]
    return RasterStack(daily(cube.shape[0], start), bands, cube, unit)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE:
        terminalreporter.write_line(line)
