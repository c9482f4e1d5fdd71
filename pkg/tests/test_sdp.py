import numpy as np
import pytest

from lapopf.case_io import CaseData, Gen, load_case
from lapopf.conic import check_solution, solve
from lapopf.network import build_admittance, eval_injections, eval_line_flows
from lapopf.sdp import (DegenerateSolution, LaplacianObjective, LiftedSolution, ReactivePenalty, add_cost_cap,
                        build_base_relaxation, build_matrices, laplacian_matrix, lift_point, qpen_matrix,
                        rank_metrics, recover_voltages, set_objective)

from conftest import FIXTURES, random_voltages


@pytest.fixture(scope="module")
def c14():
    case = load_case(FIXTURES / "case14.m")
    return case, build_admittance(case)


def test_reduced_traces_agree_with_full(c14, rng):
    case, net = c14
    full = build_matrices(case, net)
    red = full.eliminate_reference()
    assert red.dim == 2 * case.n_bus - 1 and full.dim == 2 * case.n_bus
    v = random_voltages(rng, case.n_bus, ref=case.reference_index)
    x = v.stacked
    xr = red.reduce_vector(x)
    np.testing.assert_allclose(red.expand_vector(xr), x)
    for name in full.FAMILIES:
        np.testing.assert_allclose(getattr(red, name).quad(xr), getattr(full, name).quad(x), atol=1e-12)


def test_lifted_point_reproduces_physics(case9, rng):
    # case9 has rated branches, so the flow cones are present
    case, net = case9, build_admittance(case9)
    prob = build_base_relaxation(case, net)
    v = random_voltages(rng, case.n_bus, ref=case.reference_index, spread=0.1)
    s, W = lift_point(prob, v)
    vals = prob.conic.evaluate(s, W)
    pg, qg = eval_injections(net, v, case)
    has_gen = prob.pg_index >= 0
    np.testing.assert_allclose(vals["p_balance"][has_gen], 0.0, atol=1e-12)
    np.testing.assert_allclose(vals["p_balance"][~has_gen], pg[~has_gen], atol=1e-12)
    np.testing.assert_allclose(vals["q_limits"], qg, atol=1e-12)
    np.testing.assert_allclose(vals["v_limits"], v.magnitude**2, atol=1e-12)
    cone = vals["flow"]
    fl = eval_line_flows(net, v)
    lim = prob.flow_branches
    np.testing.assert_allclose(cone[0::2, 1], fl.p_from[lim], atol=1e-12)
    np.testing.assert_allclose(cone[1::2, 2], fl.q_to[lim], atol=1e-12)
    # alpha equals the cost, so the epigraph cones are tight but satisfied
    rep = check_solution(prob.conic, s, W)
    assert rep.soc["cost"] < 1e-12


def test_laplacian_quadratic_form(c14, rng):
    case, net = c14
    w = rng.random(case.n_branch)
    L = laplacian_matrix(case, net, w)
    v = random_voltages(rng, case.n_bus)
    V = v.complex
    direct = np.sum(w * np.abs(V[net.branches.f] - V[net.branches.t]) ** 2)
    x = v.stacked
    assert x @ (L @ x) == pytest.approx(direct, rel=1e-12)
    assert abs(L - L.T).max() == 0
    np.testing.assert_allclose(L.sum(axis=1), 0, atol=1e-12)
    with pytest.raises(ValueError):
        laplacian_matrix(case, net, -w)
    with pytest.raises(ValueError):
        laplacian_matrix(case, net, w[:-1])


def test_qpen_is_total_reactive_injection(c14, rng):
    case, net = c14
    H = qpen_matrix(net)
    v = random_voltages(rng, case.n_bus)
    _, qg = eval_injections(net, v, case)
    qd = np.array([b.q_load for b in case.buses])
    x = v.stacked
    assert x @ (H @ x) == pytest.approx(np.sum(qg - qd), rel=1e-10)


def test_cost_cap_is_replaced(c14):
    case, net = c14
    prob = build_base_relaxation(case, net)
    add_cost_cap(prob, 100.0, 0.01)
    add_cost_cap(prob, 200.0, 0.02)
    caps = [b for b in prob.conic.linear if b.name == "cost_cap"]
    assert len(caps) == 1 and caps[0].hi[0] == pytest.approx(204.0)
    assert prob.cost_cap == (200.0, 0.02)
    with pytest.raises(ValueError):
        add_cost_cap(prob, np.inf, 0.01)
    with pytest.raises(ValueError):
        add_cost_cap(prob, 1.0, -0.1)


def test_objective_kinds(c14):
    case, net = c14
    prob = build_base_relaxation(case, net)
    set_objective(prob, LaplacianObjective(np.ones(case.n_branch)))
    assert prob.objective.kind == "laplacian"
    s = prob.conic.objective.scalar
    assert s.nnz == 0
    set_objective(prob, ReactivePenalty(0.5))
    assert prob.conic.objective.scalar.nnz == len(case.gens)
    with pytest.raises(ValueError):
        LaplacianObjective(-np.ones(3))
    with pytest.raises(ValueError):
        ReactivePenalty(-1.0)
    with pytest.raises(TypeError):
        set_objective(prob, "cost")


def test_two_generators_at_one_bus_rejected(case2):
    case = CaseData(case2.base_mva, case2.buses, case2.gens + (Gen(1, pmax=1.0, c1=1.0),), case2.branches)
    with pytest.raises(ValueError, match="more than one generator"):
        build_base_relaxation(case, build_admittance(case))


def test_recover_voltages_from_rank_one(rng):
    n, ref = 6, 2
    v = random_voltages(rng, n, ref=ref)
    x = np.delete(v.stacked, n + ref)
    W = np.outer(x, x)
    sol = LiftedSolution(W, np.zeros(1), np.zeros(n), 0.0, "optimal", n, ref, True)
    out = recover_voltages(sol)
    np.testing.assert_allclose(out.complex, v.complex, atol=1e-12)
    assert rank_metrics(sol)["rank_one"]
    # the sign of the eigenvector is normalized
    sol = LiftedSolution(W, np.zeros(1), np.zeros(n), 0.0, "optimal", n, ref, True)
    sol.eigenvectors = -sol.eigenvectors
    np.testing.assert_allclose(recover_voltages(sol).complex, v.complex, atol=1e-12)
    zero = LiftedSolution(np.zeros_like(W), np.zeros(1), np.zeros(n), 0.0, "optimal", n, ref, True)
    with pytest.raises(DegenerateSolution):
        recover_voltages(zero)


def test_rank_metrics():
    m = rank_metrics(np.diag([4.0, 1.0, 0.0]))
    assert m["ratio"] == pytest.approx(0.25) and not m["rank_one"]
    assert rank_metrics(np.diag([1.0, 1e-7]))["rank_one"]


def test_two_bus_relaxation_is_exact(case2):
    net = build_admittance(case2)
    prob = build_base_relaxation(case2, net)
    sol = solve(prob.conic.copy().seal())
    assert sol.optimal
    ls = LiftedSolution.from_conic(prob, sol)
    assert rank_metrics(ls)["ratio"] < 1e-8
    v = recover_voltages(ls)
    assert v.vq[case2.reference_index] == 0.0
    pg, _ = eval_injections(net, v, case2)
    g = case2.gens[0]
    assert ls.cost == pytest.approx(g.c2 * pg[0] ** 2 + g.c1 * pg[0] + g.c0, rel=1e-7)
    # explicit reference constraint gives the same bound
    prob_full = build_base_relaxation(case2, net, eliminate_reference=False)
    sol_full = solve(prob_full.conic.copy().seal())
    assert sol_full.objective == pytest.approx(sol.objective, rel=1e-7)
