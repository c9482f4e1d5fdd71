import numpy as np
import pytest

from lapopf.case_io import load_case
from lapopf.network import (Tolerances, VoltageVector, build_admittance, check_feasibility, eval_cost,
                            eval_injections, eval_line_flows, operating_point)

from conftest import FIXTURES, random_voltages


def _direct_injections(case, net, V):
    # polar form: P_k = sum_m |V_k||V_m| (G_km cos th_km + B_km sin th_km), Q likewise
    G, B = net.G.toarray(), net.B.toarray()
    vm, va = np.abs(V), np.angle(V)
    th = va[:, None] - va[None, :]
    P = vm * ((G * np.cos(th) + B * np.sin(th)) @ vm)
    Q = vm * ((G * np.sin(th) - B * np.cos(th)) @ vm)
    pd = np.array([b.p_load for b in case.buses])
    qd = np.array([b.q_load for b in case.buses])
    return P + pd, Q + qd


def test_ybus_matches_pypower():
    pytest.importorskip("pypower")
    from pypower.ext2int import ext2int
    from pypower.makeYbus import makeYbus
    from oracles.local_opf import read_m

    for name in ("case14.m", "case118.m", "case300.m"):
        ppc = ext2int(read_m(FIXTURES / name))
        Ybus, _, _ = makeYbus(ppc["baseMVA"], ppc["bus"], ppc["branch"])
        net = build_admittance(load_case(FIXTURES / name))
        assert abs(net.Y - Ybus).max() < 1e-10


def test_injections_match_polar_form(case14, rng):
    net = build_admittance(case14)
    for _ in range(20):
        v = random_voltages(rng, case14.n_bus)
        pg, qg = eval_injections(net, v, case14)
        p_ref, q_ref = _direct_injections(case14, net, v.complex)
        np.testing.assert_allclose(pg, p_ref, atol=1e-10)
        np.testing.assert_allclose(qg, q_ref, atol=1e-10)


def test_branch_flows_sum_to_injections(rng):
    # shunt-free case: bus injection is the sum of the flows leaving the bus
    case = load_case(FIXTURES / "case9.m")
    net = build_admittance(case)
    v = random_voltages(rng, case.n_bus)
    fl = eval_line_flows(net, v)
    s = np.zeros(case.n_bus, dtype=complex)
    np.add.at(s, net.branches.f, fl.p_from + 1j * fl.q_from)
    np.add.at(s, net.branches.t, fl.p_to + 1j * fl.q_to)
    pg, qg = eval_injections(net, v, case)
    pd = np.array([b.p_load for b in case.buses])
    qd = np.array([b.q_load for b in case.buses])
    np.testing.assert_allclose(s.real, pg - pd, atol=1e-12)
    np.testing.assert_allclose(s.imag, qg - qd, atol=1e-12)


def test_phase_shifter_flow_matches_hand_formula():
    from lapopf.case_io import Branch, Bus, CaseData, Gen

    case = CaseData(100.0, [Bus(1, is_reference=True), Bus(2)], [Gen(1, pmax=1, qmin=-1, qmax=1)],
                    [Branch(1, 2, 0.02, 0.1, b_sh=0.04, tau=1.05, theta_shift=0.1)])
    net = build_admittance(case)
    V = np.array([1.02, 0.97 * np.exp(-0.2j)])
    fl = eval_line_flows(net, VoltageVector.from_complex(V))
    ys, a = 1 / (0.02 + 0.1j), 1.05 * np.exp(0.1j)
    # current through the series element, seen from the ideal transformer secondary
    i_s = (V[0] / a - V[1]) * ys
    i_f = (i_s + 0.02j * V[0] / a) / np.conj(a)
    i_t = -i_s + 0.02j * V[1]
    assert V[0] * np.conj(i_f) == pytest.approx(fl.p_from[0] + 1j * fl.q_from[0], abs=1e-12)
    assert V[1] * np.conj(i_t) == pytest.approx(fl.p_to[0] + 1j * fl.q_to[0], abs=1e-12)


def test_cost_per_bus_and_per_generator(case9):
    net = build_admittance(case9)
    v = VoltageVector.from_complex(np.ones(case9.n_bus))
    op = operating_point(case9, net, v)
    per_gen = np.array([op.p_gen[case9.bus_index[g.bus]] for g in case9.gens])
    assert eval_cost(case9, op.p_gen) == pytest.approx(eval_cost(case9, per_gen))
    assert op.cost == pytest.approx(sum(g.c2 * p * p + g.c1 * p + g.c0 for g, p in zip(case9.gens, per_gen)))


def test_feasibility_report(case2):
    net = build_admittance(case2)
    from scipy.optimize import fsolve

    # power flow for the load bus at V1 = 1.02
    def resid(z):
        v = VoltageVector.from_complex(np.array([1.02, z[0] * np.exp(1j * z[1])]))
        pg, qg = eval_injections(net, v, case2)
        return [pg[1], qg[1]]

    vm2, va2 = fsolve(resid, [1.0, 0.0], xtol=1e-13)
    ok = VoltageVector.from_complex(np.array([1.02, vm2 * np.exp(1j * va2)]))
    rep = check_feasibility(case2, net, ok)
    assert rep.max_gen_violation < 1e-8
    assert rep.passed, rep.as_dict()
    low = VoltageVector.from_complex(np.array([1.0, 0.9]))
    rep = check_feasibility(case2, net, low)
    assert rep.max_voltage_violation == pytest.approx(0.05)
    assert not rep.passed
    # big angle: generation over its box and the line over its rating
    far = VoltageVector.from_complex(np.array([1.0, np.exp(-0.5j)]))
    rep = check_feasibility(case2, net, far, Tolerances(eps_V=1.0))
    assert rep.max_flow_violation > 100 and rep.max_gen_violation > 100
    with pytest.raises(ValueError):
        Tolerances(eps_V=-1)


def test_voltage_vector_checks():
    with pytest.raises(ValueError):
        VoltageVector(np.ones(3), np.ones(2))
    with pytest.raises(ValueError):
        VoltageVector(np.array([1.0, np.nan]), np.zeros(2))
    v = VoltageVector.from_stacked(np.arange(6.0))
    assert v.vd.tolist() == [0, 1, 2] and v.vq.tolist() == [3, 4, 5]
