import csv
import json

import pytest

from lapopf.cli import TRACE_COLUMNS, main, report_schema

from conftest import FIXTURES

jsonschema = pytest.importorskip("jsonschema")


def _validate(rep):
    jsonschema.validate(rep, report_schema())


def test_solve_writes_valid_report_and_trace(tmp_path, capsys):
    rp, tp = tmp_path / "r.json", tmp_path / "t.csv"
    code = main(["solve", str(FIXTURES / "case9.m"), "-q", "--report", str(rp), "--trace", str(tp), "--voltages"])
    assert code == 0
    rep = json.loads(rp.read_text())
    _validate(rep)
    assert rep["outcome"] == "converged"
    assert len(rep["voltages"]["vm"]) == 9
    with open(tp, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRACE_COLUMNS
    # one row per solve: the base relaxation plus each weighted iteration
    assert len(rows) - 1 == len(rep["trace"]) == rep["iterations"] + 1
    assert "converged" in capsys.readouterr().out


def test_relax_reports_rank_one(tmp_path, capsys):
    rp = tmp_path / "relax.json"
    assert main(["relax", str(FIXTURES / "case14.m"), "--report", str(rp)]) == 0
    out = capsys.readouterr().out
    assert "numerically rank-one: true" in out
    rep = json.loads(rp.read_text())
    _validate(rep)
    assert rep["rank"]["rank_one"] and rep["feasibility"]["passed"]


def test_trace_from_report_round_trip(tmp_path):
    rp, tp = tmp_path / "r.json", tmp_path / "again.csv"
    assert main(["solve", str(FIXTURES / "case2.json"), "-q", "--report", str(rp)]) == 0
    assert main(["trace", "--from-report", str(rp), "-o", str(tp)]) == 0
    lines = tp.read_text().splitlines()
    assert lines[0].split(",") == list(TRACE_COLUMNS) and len(lines) == 2


def test_batch_writes_one_report_per_case(tmp_path):
    out = tmp_path / "reports"
    code = main(["relax", str(FIXTURES / "case2.json"), str(FIXTURES / "case14.m"), "--report", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["case14.json", "case2.json"]


def test_preprocessing_is_recorded(tmp_path):
    rp = tmp_path / "r.json"
    assert main(["relax", str(FIXTURES / "case14.m"), "--thrshz", "1e-3", "--min-r", "1e-4",
                 "--report", str(rp)]) == 0
    rep = json.loads(rp.read_text())
    _validate(rep)
    assert rep["preprocessing"]["min_r"] == 1e-4


@pytest.mark.parametrize("args, code", [
    (["solve", str(FIXTURES / "bad.json")], 1),
    (["solve", str(FIXTURES / "missing.m")], 1),
    (["solve", str(FIXTURES / "case9.m"), "-q", "--max-iter", "0"], 2),
    (["solve", str(FIXTURES / "infeasible.json"), "-q"], 3),
    (["relax", str(FIXTURES / "infeasible.json")], 3),
    (["trace"], 1),
])
def test_exit_codes(args, code, capsys):
    assert main(args) == code


def test_schema_rejects_unknown_keys():
    with pytest.raises(jsonschema.ValidationError):
        _validate({"report_version": "lapopf-report/1", "command": "relax", "bogus": 1})
