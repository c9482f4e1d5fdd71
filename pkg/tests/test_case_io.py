import io
import json
import math

import numpy as np
import pytest

from lapopf.case_io import (Branch, Bus, CaseData, CaseSemanticError, CaseSyntaxError, Gen,
                            PreprocessingInfeasible, dump_json, enforce_min_resistance, load_case,
                            merge_low_impedance, parse_case)

from conftest import FIXTURES

CASE3_M = """function mpc = case3
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
\t2\t1\t90\t30\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;  % load bus
\t3\t2\t0\t0\t0\t19\t1\t1\t0\t345\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1\t100\t1\t250\t10\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;
\t3\t0\t0\t300\t-300\t1\t100\t1\t270\t10\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.085\t0.176\t250\t250\t250\t0\t0\t1\t-360\t360;
\t2\t3\t0.017\t0.092\t0.158\t0\t250\t250\t0.98\t2\t1\t-360\t360;
\t1\t3\t0.01\t0.1\t0\t150\t250\t250\t0\t0\t0\t-360\t360;
];
mpc.gencost = [
\t2\t1500\t0\t3\t0.11\t5\t150;
\t2\t2000\t0\t3\t0.085\t1.2\t600;
];
"""


def test_matpower_text_converts_to_per_unit():
    case = parse_case(CASE3_M, "matpower_m", name="case3")
    assert case.n_bus == 3
    # the out-of-service branch is dropped
    assert case.n_branch == 2
    assert case.buses[1].p_load == pytest.approx(0.9)
    assert case.buses[2].b_shunt == pytest.approx(0.19)
    assert case.reference_index == 0
    g = case.gens[0]
    assert (g.pmin, g.pmax, g.qmin, g.qmax) == pytest.approx((0.1, 2.5, -3.0, 3.0))
    # cost in $/h as a function of per-unit output
    assert g.c2 == pytest.approx(0.11 * 100**2)
    assert g.c1 == pytest.approx(5 * 100)
    assert g.c0 == pytest.approx(150)
    br = case.branches[1]
    assert br.tau == pytest.approx(0.98)
    assert br.theta_shift == pytest.approx(math.radians(2))
    assert br.s_max == 0.0  # rateA = 0 means unlimited
    assert case.branches[0].tau == 1.0


def test_bytes_and_file_objects_are_accepted():
    a = parse_case(CASE3_M.encode(), "matpower_m")
    b = parse_case(io.StringIO(CASE3_M), "matpower_m")
    assert a.buses == b.buses and a.branches == b.branches


def test_json_round_trip_is_lossless(case9):
    text = dump_json(case9)
    back = parse_case(text, "json", name=case9.name)
    assert back.buses == case9.buses
    assert back.gens == case9.gens
    assert back.branches == case9.branches
    assert back.base_mva == case9.base_mva


@pytest.mark.parametrize("name, n_bus, n_branch", [
    ("case9.m", 9, 9), ("case14.m", 14, 20), ("case_ieee30.m", 30, 41), ("case30.m", 30, 41),
    ("case39.m", 39, 46), ("case57.m", 57, 80), ("case118.m", 118, 186), ("case300.m", 300, 411),
])
def test_fixture_sizes(name, n_bus, n_branch):
    case = load_case(FIXTURES / name)
    assert (case.n_bus, case.n_branch) == (n_bus, n_branch)


def test_syntax_error_reports_line():
    with pytest.raises(CaseSyntaxError) as err:
        load_case(FIXTURES / "bad.json")
    assert err.value.line is not None


def test_unterminated_matrix_is_a_syntax_error():
    text = CASE3_M.replace("];\nmpc.gen", "\nmpc.gen", 1)
    with pytest.raises(CaseSyntaxError):
        parse_case(text, "matpower_m")


def test_piecewise_linear_cost_rejected():
    text = CASE3_M.replace("\t2\t1500\t0\t3\t0.11", "\t1\t1500\t0\t3\t0.11")
    with pytest.raises(CaseSemanticError):
        parse_case(text, "matpower_m")


@pytest.mark.parametrize("mutate", [
    lambda d: d["buses"][0].update(is_reference=False),
    lambda d: d["gens"][0].update(bus=99),
    lambda d: d["gens"][0].update(c2=-1.0),
    lambda d: d["branches"][0].update(to_bus=1),
    lambda d: d["branches"][0].update(r=0.0, x=0.0),
    lambda d: d["buses"][1].update(vmin=1.2),
])
def test_semantic_errors(case2, mutate):
    d = json.loads(dump_json(case2))
    mutate(d)
    with pytest.raises(CaseSemanticError):
        parse_case(json.dumps(d), "json")


def test_unknown_extension(tmp_path):
    p = tmp_path / "case.txt"
    p.write_text("{}")
    with pytest.raises(ValueError):
        load_case(p)


def _chain(z_small=1e-4):
    buses = [Bus(1, is_reference=True), Bus(2, p_load=0.5, q_load=0.1, vmin=0.95, g_shunt=0.01),
             Bus(3, p_load=0.25, q_load=0.05, vmax=1.05, b_shunt=0.02), Bus(4, p_load=0.1)]
    gens = [Gen(1, pmax=2.0, qmin=-1, qmax=1, c2=10, c1=5), Gen(3, pmax=1.0, qmin=-1, qmax=1, c1=20)]
    branches = [Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.0, z_small), Branch(3, 4, 0.02, 0.2),
                Branch(2, 4, 0.01, 0.1)]
    return CaseData(100.0, buses, gens, branches)


def test_merge_joins_low_impedance_pairs():
    case = _chain()
    out, log = merge_low_impedance(case, 1e-3)
    assert (log.buses_before, log.branches_before) == (4, 4)
    assert (log.buses_after, log.branches_after) == (3, 3)
    assert log.merged == ((2, (3,)),)
    b2 = out.buses[out.bus_index[2]]
    assert b2.p_load == pytest.approx(0.75)
    assert b2.b_shunt == pytest.approx(0.02) and b2.g_shunt == pytest.approx(0.01)
    assert (b2.vmin, b2.vmax) == (0.95, 1.05)
    # generator moved, not aggregated
    assert [g.bus for g in out.gens] == [1, 2]
    assert out.total_load() == pytest.approx(case.total_load(), abs=1e-12)


def test_merge_noop_keeps_case():
    case = _chain(z_small=0.05)
    out, log = merge_low_impedance(case, 1e-3)
    assert out is case and log.merged == ()


def test_merge_empty_voltage_band():
    case = _chain()
    buses = list(case.buses)
    buses[1] = Bus(2, vmin=1.06)
    bad = CaseData(100.0, buses, case.gens, case.branches)
    with pytest.raises(PreprocessingInfeasible):
        merge_low_impedance(bad, 1e-3)


def test_min_resistance():
    case = _chain()
    out = enforce_min_resistance(case, 1e-4)
    assert np.all(np.array([br.r for br in out.branches]) >= 1e-4)
    assert out.branches[0].r == case.branches[0].r
    assert enforce_min_resistance(out, 1e-4) is out
    with pytest.raises(ValueError):
        enforce_min_resistance(case, -1.0)
