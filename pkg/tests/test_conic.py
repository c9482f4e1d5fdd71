import numpy as np
import pytest
import scipy.sparse as sp

from lapopf.conic import (ConicProblem, SolverSettings, SolveStatus, Terms, check_solution, dump_triplets, smat,
                          solve, svec, trace_terms, validate)


def _eig_problem(A):
    # max tr(A W) s.t. tr W = 1, W psd  ->  largest eigenvalue of A
    d = A.shape[0]
    prob = ConicProblem(d)
    prob.add_linear("trace", trace_terms([sp.eye(d)]), lo=1.0, hi=1.0)
    prob.set_objective(trace_terms([sp.csr_matrix(-A)]))
    return prob.seal()


def test_svec_inner_product(rng):
    A = rng.standard_normal((6, 6))
    A = A + A.T
    B = rng.standard_normal((6, 6))
    B = B + B.T
    assert svec(A) @ svec(B) == pytest.approx(np.trace(A @ B))
    np.testing.assert_allclose(smat(svec(A)), A)


def test_trace_terms_match_trace(rng):
    A = rng.standard_normal((5, 5))
    A = A + A.T
    W = rng.standard_normal((5, 5))
    W = W @ W.T
    prob = ConicProblem(5)
    prob.add_linear("a", trace_terms([sp.csr_matrix(A)]))
    assert prob.evaluate(np.zeros(0), W)["a"][0] == pytest.approx(np.trace(A @ W))


def test_small_sdp():
    # min tr W s.t. W11 + 2 W22 = 1  ->  W = diag(0, 1/2)
    prob = ConicProblem(2)
    prob.add_linear("eq", trace_terms([sp.diags([1.0, 2.0])]), lo=1.0, hi=1.0)
    prob.set_objective(trace_terms([sp.eye(2)]))
    sol = solve(prob.seal())
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.objective == pytest.approx(0.5, abs=1e-7)
    np.testing.assert_allclose(sol.W, np.diag([0.0, 0.5]), atol=1e-6)


def test_largest_eigenvalue(rng):
    A = rng.standard_normal((7, 7))
    A = A + A.T
    sol = solve(_eig_problem(A))
    assert sol.optimal
    assert -sol.objective == pytest.approx(np.linalg.eigvalsh(A)[-1], rel=1e-7)
    assert sol.relative_gap <= 1e-8 and sol.primal_residual <= 1e-8


def test_second_order_cone():
    # min t s.t. ||(x1 - 3, x2 - 4)|| <= t, x1 = x2 = 0
    prob = ConicProblem(1)
    t, x1, x2 = prob.add_scalars(["t", "x1", "x2"])
    prob.add_soc("c", Terms.build(3, 3, [0, 1, 2], [t, x1, x2], [1, 1, 1]), const=[0, -3, -4])
    prob.add_linear("fix", Terms.build(2, 3, [0, 1], [x1, x2], [1, 1]), lo=0.0, hi=0.0)
    # keep the (unused) matrix block bounded
    prob.add_linear("w", trace_terms([sp.eye(1)], 3), lo=0.0, hi=1.0)
    prob.set_objective(Terms.build(1, 3, [0], [t], [1.0]))
    sol = solve(prob.seal())
    assert sol.optimal
    assert sol.x[t] == pytest.approx(5.0, rel=1e-7)


def test_infeasible_detected():
    prob = ConicProblem(2)
    prob.add_linear("neg", trace_terms([sp.eye(2)]), lo=-2.0, hi=-1.0)
    prob.set_objective(trace_terms([sp.eye(2)]))
    sol = solve(prob.seal())
    assert sol.status is SolveStatus.INFEASIBLE


def test_iteration_limit(rng):
    A = rng.standard_normal((7, 7))
    sol = solve(_eig_problem(A + A.T), SolverSettings(max_iter=1))
    assert sol.status is SolveStatus.ITERATION_LIMIT


def test_malformed_problem_rejected():
    prob = ConicProblem(2)
    prob.add_linear("bad", Terms.build(1, 0, mrow=[0], mi=[0], mj=[1], mval=[1.0]), lo=0.0)
    msgs = validate(prob)
    assert any("no objective" in m for m in msgs)
    assert any("upper-triangle" in m for m in msgs)
    with pytest.raises(ValueError):
        solve(prob)


def test_sealed_and_copy():
    prob = ConicProblem(2)
    prob.add_linear("a", trace_terms([sp.eye(2)]), hi=1.0)
    prob.seal()
    with pytest.raises(RuntimeError):
        prob.add_scalar("x")
    other = prob.copy()
    other.remove_linear("a")
    assert [b.name for b in prob.linear] == ["a"] and other.linear == []
    with pytest.raises(ValueError):
        ConicProblem(2).add_linear("inv", trace_terms([sp.eye(2)]), lo=1.0, hi=0.0)


def test_dump_triplets():
    prob = ConicProblem(2)
    x = prob.add_scalar("x")
    prob.add_linear("row", Terms.build(1, 1, [0], [x], [2.0], mrow=[0], mi=[1], mj=[0], mval=[np.sqrt(2)]),
                    const=3.0, lo=0.0, hi=1.0)
    prob.set_objective(Terms.build(1, 1, [0], [x], [1.0]))
    text = dump_triplets(prob)
    lines = text.splitlines()
    assert lines[0] == "# lapopf-triplets/1 dim=2 scalars=1"
    assert "S 0 x" in lines and "B 1 L 0.0 1.0 row:0" in lines
    assert "1 -1 0 2.0" in lines and "1 -1 -1 3.0" in lines


def test_check_solution_scaling():
    prob = ConicProblem(2)
    prob.add_linear("cap", trace_terms([sp.eye(2)]), hi=1.0)
    prob.set_objective(trace_terms([sp.eye(2)]))
    rep = check_solution(prob, np.zeros(0), np.eye(2))
    # tr W = 2 against bound 1: (2 - 1) / (1 + 1 + 2)
    assert rep.linear["cap"] == pytest.approx(0.25)
    assert rep.worst == ("cap", 0)
    rep = check_solution(prob, np.zeros(0), np.diag([0.5, -0.1]))
    assert rep.psd == pytest.approx(0.1 / 1.5) and rep.worst == ("psd", -1)
    with pytest.raises(ValueError):
        check_solution(prob, np.zeros(1), np.eye(2))
