import numpy as np
import pytest

from conftest import case, solved, two_bus_dc, two_bus_pv
from helmpw.diagnostics import AT_QMAX, AT_QMIN, INTERIOR, complementarity_check, mismatch
from helmpw.refsolver import enumerate_assignments, newton_solve


def test_flat_network():
    rep = newton_solve(two_bus_dc(P=0.0))
    assert rep.converged and rep.iterations <= 2
    assert np.allclose(rep.V, 1.0)


def test_matches_helm_on_case9():
    rep = newton_solve(case("case9"))
    sol = solved("case9", 1.0, False)
    assert np.abs(np.abs(rep.V) - np.abs(sol.V)).max() < 1e-6
    assert rep.mismatch <= 1e-8
    assert mismatch(case("case9"), rep.V, rep.Q) <= 1e-8


def test_unknown_strategy():
    with pytest.raises(ValueError):
        newton_solve(case("case9"), "switch-some")


@pytest.mark.parametrize("strategy", ["switch-all", "switch-one"])
def test_switching_satisfies_complementarity(strategy):
    net = case("case14").scaled(1.2)
    rep = newton_solve(net, strategy)
    assert rep.converged and rep.outer_rounds >= 1
    statuses, bad = complementarity_check(net, rep.V, rep.Q)
    assert not bad
    assert rep.counts() == (0, 3)
    assert rep.history[0] == (INTERIOR,) * len(net.controls)


def test_switch_one_changes_one_control_per_round():
    rep = newton_solve(case("case14").scaled(1.2), "switch-one")
    for a, b in zip(rep.history, rep.history[1:]):
        assert sum(x != y for x, y in zip(a, b)) == 1


def test_one_control_three_assignments():
    res = enumerate_assignments(two_bus_pv(qmin=-0.5, qmax=0.5))
    assert sorted(a.status for a in res) == sorted([(INTERIOR,), (AT_QMIN,), (AT_QMAX,)])
    assert [a.status for a in res if a.feasible] == [(INTERIOR,)]


def test_one_sided_limits_skip_missing_side():
    res = enumerate_assignments(two_bus_pv(qmin=None, qmax=0.5))
    assert len(res) == 2


def test_enumeration_cap():
    net = case("case118")
    assert len(net.controls) >= 13
    with pytest.raises(ValueError):
        enumerate_assignments(net, controls=range(13))


def test_case9_enumeration_contains_helm():
    net = case("case9").scaled(1.2)
    res = enumerate_assignments(net)
    assert len(res) <= 9
    sol = solved("case9", 1.2, True)
    assert sol.status in [a.status for a in res if a.feasible]
