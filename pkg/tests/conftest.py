import functools
import json

import pytest

from helmpw.netmodel import load_case, parse_json

LAMBDA_CRIT = 2.48539267  # case9 nose point with setpoints from the bus table


@functools.lru_cache(maxsize=None)
def case(name):
    return load_case(name)


def two_bus_dc(G=1.0, P=-0.25):
    """Swing bus and one load over a pure conductance."""
    doc = {"buses": [{"id": 1, "kind": "swing"}, {"id": 2, "kind": "pq", "Pd": -P}],
           "branches": [{"from": 1, "to": 2, "y": [G, 0.0]}]}
    return parse_json(json.dumps(doc))


def two_bus_pv(qmin=-0.5, qmax=0.5, vsp=1.0, P=-0.3, x=0.2):
    """Swing bus feeding a PV bus through a reactance."""
    doc = {"buses": [{"id": 1, "kind": "swing"}, {"id": 2, "kind": "pv", "Pd": -P}],
           "branches": [{"from": 1, "to": 2, "y": [0.0, -1.0 / x]}],
           "generators": [{"bus": 2, "Pg": 0.0, "Qmin": qmin, "Qmax": qmax, "Vg": vsp}]}
    return parse_json(json.dumps(doc))


@pytest.fixture
def case9():
    return case("case9")


@functools.lru_cache(maxsize=None)
def solved(name, lam=1.0, limits=True):
    """Cached P-W solve of a scaled fixture, shared by the slow tests."""
    from helmpw.pw import solve_pw

    return solve_pw(case(name).scaled(lam), limits=limits)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
