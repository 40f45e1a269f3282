import numpy as np
import pytest

from gridrl.chronics import generate_synthetic
from gridrl.env import Chronic, reset
from gridrl.grid import grid_from_dict, load_grid


@pytest.fixture(scope="session")
def case14():
    return load_grid("case14")


@pytest.fixture(scope="session")
def easy_chronic(case14):
    return generate_synthetic(case14, 7, "easy", 300)


@pytest.fixture(scope="session")
def hard_chronic(case14):
    return generate_synthetic(case14, 7, "hard", 2016)


@pytest.fixture
def easy_state(case14, easy_chronic):
    return reset(case14, easy_chronic)


def tiny_grid(x=0.1, limit=1.0, gen_pmax=2.0):
    """Two substations, one line, generator at 0 and load at 1."""
    return grid_from_dict({
        "substations": 2,
        "lines": [{"id": 0, "origin": 0, "extremity": 1, "x": x, "thermal_limit": limit}],
        "generators": [{"id": 0, "substation": 0, "p_max": gen_pmax}],
        "loads": [{"id": 0, "substation": 1, "p_nominal": 0.5}],
        "slack_gen": 0,
    })


def flat_chronic(grid, gen_p, load_p, T=10, cid="flat"):
    return Chronic(cid, np.tile(np.asarray(gen_p, float), (T, 1)), np.tile(np.asarray(load_p, float), (T, 1)))


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(number)
    passed = rep.passed and (prev is None or prev[1])
    _CRITERIA[number] = (title, passed, detail or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
