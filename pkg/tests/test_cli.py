import json
import shutil

import pytest

from conftest import LAMBDA_CRIT, case, two_bus_dc
from helmpw import cli
from helmpw.cli import RunOptions, collapse_point, main, parse_options, read_config
from helmpw.netmodel import FIXTURE_DIR, to_json


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_solve_with_limits(capsys):
    code, out, _ = run(["solve", "case9", "--qlims"], capsys)
    assert code == 0 and "regulates" in out


def test_solve_infeasible_scale(capsys):
    code, out, _ = run(["solve", "case9", "--scale", "3.0"], capsys)
    assert code == 2 and "s_crit" in out


def test_missing_file(capsys):
    code, _, err = run(["solve", "no_such_case.m"], capsys)
    assert code == 1 and err


@pytest.mark.parametrize("argv", [["solve", "case9", "--bogus"], ["frobnicate", "case9"],
                                  ["solve", "case9", "--qlims", "--no-qlims"],
                                  ["convergence", "case9", "--nmax", "ten"]])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


@pytest.mark.parametrize("argv", [["solve", "case9", "--scale", "-1"],
                                  ["solve", "case9", "--tol-update", "0"]])
def test_invalid_options(argv, capsys):
    assert run(argv, capsys)[0] == 1


def test_json_output_schema(capsys):
    code, out, _ = run(["solve", "case9", "--qlims", "--output", "json"], capsys)
    d = json.loads(out)
    assert code == 0
    assert {"case", "scale", "converged", "infeasible", "s_crit", "stages", "mismatch",
            "lagrangian", "buses", "controls", "trace"} <= set(d)
    assert len(d["buses"]) == 9 and len(d["controls"]) == 2
    assert d["mismatch"] <= 1e-8


def test_csv_output(capsys):
    code, out, _ = run(["solve", "case14", "--output", "csv"], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "bus,vm,va_deg" and len(lines) == 15


def test_out_file(tmp_path, capsys):
    dest = tmp_path / "r.json"
    assert run(["solve", "case9", "--output", "json", "--out", str(dest)], capsys)[0] == 0
    assert json.loads(dest.read_text())["converged"]


@pytest.mark.parametrize("strategy", ["nr1", "nr2"])
def test_nr_strategies(strategy, capsys):
    code, out, _ = run(["solve", "case14", "--qlims", "--scale", "1.2", "--strategy", strategy,
                        "--output", "json"], capsys)
    d = json.loads(out)
    assert code == 0 and sum(c["status"] == "at-Qmax" for c in d["controls"]) == 3


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nscale = 1.5\nenforce_qlims = yes\noutput = 'json'\nnmax = 24\n")
    _, opts = parse_options(["solve", "case9", "--config", str(cfg), "--scale", "1.1"])
    assert opts.scale == 1.1 and opts.enforce_qlims and opts.output == "json" and opts.Nmax == 24
    _, opts = parse_options(["solve", "case9", "--config", str(cfg), "--no-qlims"])
    assert opts.scale == 1.5 and not opts.enforce_qlims
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    with pytest.raises(ValueError):
        read_config(bad)


def test_fixture_directory_from_environment(tmp_path, monkeypatch, capsys):
    shutil.copy(FIXTURE_DIR / "case9.m", tmp_path / "mycase.m")
    assert run(["solve", "mycase"], capsys)[0] == 1
    monkeypatch.setenv("HELM_PW_FIXTURES", str(tmp_path))
    assert run(["solve", "mycase"], capsys)[0] == 0


def test_json_case_file(tmp_path, capsys):
    path = tmp_path / "dc.json"
    path.write_text(to_json(two_bus_dc(P=-0.2)))
    code, out, _ = run(["solve", str(path), "--output", "json"], capsys)
    assert code == 0 and json.loads(out)["buses"][1]["vm"] == pytest.approx((1 + 0.2 ** 0.5) / 2)


def test_compare_case9(capsys):
    code, out, _ = run(["compare", "case9", "--output", "json"], capsys)
    row = json.loads(out)
    m = row["methods"]
    assert code == 0 and row["controls"] == 2
    assert (m["nr1"]["qmin"], m["nr1"]["qmax"]) == (m["helm"]["qmin"], m["helm"]["qmax"])
    assert (m["nr2"]["qmin"], m["nr2"]["qmax"]) == (m["helm"]["qmin"], m["helm"]["qmax"])
    code, out, _ = run(["compare", "case9"], capsys)
    assert out.split()[-4:-2] == ["=", "="]


def test_collapse_solve_budget(monkeypatch):
    calls = []
    real = cli._verdict

    def counting(net, lam, opts):
        calls.append(lam)
        return real(net, lam, opts)

    monkeypatch.setattr(cli, "_verdict", counting)
    r = collapse_point(case("case9"), RunOptions(case="case9", precision=1e-2))
    assert r.solves == len(calls)
    # the verdict at 1 and the doubling phase up to the first infeasible scale
    bracketing = 1 + next(k for k, lam in enumerate(calls[1:], 1) if lam > LAMBDA_CRIT)
    assert r.solves - bracketing <= 8
    assert r.window <= 1e-2 and r.lo <= LAMBDA_CRIT <= r.hi


def test_collapse_unbounded(tmp_path, capsys):
    path = tmp_path / "flat.json"
    path.write_text(to_json(two_bus_dc(P=0.0)))
    code, out, _ = run(["collapse", str(path), "--lam-max", "8", "--output", "json"], capsys)
    d = json.loads(out)
    assert code == 0 and d["unbounded"] and d["hi"] is None


def test_collapse_infeasible_at_unit_scale(tmp_path, capsys):
    path = tmp_path / "heavy.json"
    path.write_text(to_json(two_bus_dc(P=-0.3)))
    code, _, err = run(["collapse", str(path)], capsys)
    assert code == 1 and "scale 1" in err


def test_convergence_flat(tmp_path, capsys):
    path = tmp_path / "flat.json"
    path.write_text(to_json(two_bus_dc(P=0.0)))
    code, out, _ = run(["convergence", str(path)], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "stage,N,error"
    assert {ln.split(",")[0] for ln in lines[1:]} <= {"0"} and len(lines) <= 33


def test_convergence_near_collapse(capsys):
    code, out, _ = run(["convergence", "case9", "--scale", str(LAMBDA_CRIT - 1e-6),
                        "--tol-update", "1e-12"], capsys)
    rows = [ln.split(",") for ln in out.strip().splitlines()[1:]]
    stages = sorted({int(r[0]) for r in rows})
    assert code == 0 and len(stages) > 2
    plateau = [min(float(r[2]) for r in rows if int(r[0]) == k) for k in stages]
    assert plateau[0] > plateau[-1]


def test_exit_codes_across_fixtures():
    for name in ("case9", "case14", "case30"):
        assert main(["solve", name, "--qlims"]) == 0
        assert main(["solve", name, "--qlims", "--scale", "10"]) == 2
