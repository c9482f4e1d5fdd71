"""Iterative Laplacian-weight algorithm for near-globally-optimal OPF points.

The base relaxation gives a lower bound ``c*``. While the relaxation
solution is not (numerically) rank one, the cost is capped at
``c* (1 + delta)`` and the objective is replaced by a weighted Laplacian of
the network, with branch weights accumulated from the apparent-power flow
mismatches between the solution and its closest rank-one matrix.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .case_io import CaseData
from .conic import SolverSettings, SolveStatus, solve
from .network import (FeasibilityReport, NetworkMatrices, OperatingPoint, Tolerances, build_admittance,
                      check_feasibility, operating_point)
from .sdp import (DegenerateSolution, LaplacianObjective, LiftedSolution, ReactivePenalty, RelaxationProblem,
                  SdpMatrices, add_cost_cap, build_base_relaxation, rank_metrics, recover_voltages,
                  set_objective)

log = logging.getLogger(__name__)

__all__ = [
    "AlgorithmSettings",
    "MismatchVectors",
    "IterationRecord",
    "IterationTrace",
    "Outcome",
    "AlgorithmResult",
    "closest_rank_one",
    "injection_mismatch",
    "flow_mismatch",
    "mismatches",
    "relaxation_gap",
    "run_algorithm",
]

OBJECTIVES = ("laplacian", "cost", "qpen")


# ---------------------------------------------------------------------------
# rank-one approximation and mismatches


def _top_pair(W: np.ndarray) -> tuple[float, np.ndarray]:
    Ws = 0.5 * (W + W.T)
    lam, vec = np.linalg.eigh(Ws)
    return float(lam[-1]), vec[:, -1]


def closest_rank_one(W) -> np.ndarray:
    """Nearest rank-one matrix ``lambda_1 eta_1 eta_1^T`` in Frobenius norm.

    Raises
    ------
    DegenerateSolution
        If the largest eigenvalue is negative.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("W must be square")
    l1, eta = _top_pair(W)
    if l1 < 0:
        raise DegenerateSolution(f"largest eigenvalue {l1:.3e} is negative")
    return l1 * np.outer(eta, eta)


def _check_dims(mats: SdpMatrices, W_star, W1):
    W_star = np.asarray(W_star, dtype=float)
    W1 = np.asarray(W1, dtype=float)
    if W_star.shape != W1.shape or W_star.shape != (mats.dim, mats.dim):
        raise ValueError(f"matrices must both be {mats.dim}x{mats.dim} for these trace matrices")
    return W_star - W1


def injection_mismatch(mats: SdpMatrices, W_star, W1, base_mva: float, split: bool = False):
    """Per-bus apparent-power injection mismatch in MVA.

    With ``split=True`` returns ``(S, |dP|, |dQ|)``.
    """
    dW = _check_dims(mats, W_star, W1)
    dp = mats.Y.traces(dW) * base_mva
    dq = mats.Ybar.traces(dW) * base_mva
    s = np.hypot(dp, dq)
    return (s, np.abs(dp), np.abs(dq)) if split else s


def flow_mismatch(mats: SdpMatrices, W_star, W1, base_mva: float, split: bool = False):
    """Per-branch flow mismatch in MVA, summed over both branch ends.

    With ``split=True`` returns ``(S, |dP_lm| + |dP_ml|, |dQ_lm| + |dQ_ml|)``.
    """
    dW = _check_dims(mats, W_star, W1)
    p_lm = mats.Zlm.traces(dW) * base_mva
    q_lm = mats.Zbar_lm.traces(dW) * base_mva
    p_ml = mats.Zml.traces(dW) * base_mva
    q_ml = mats.Zbar_ml.traces(dW) * base_mva
    s = np.hypot(p_lm, q_lm) + np.hypot(p_ml, q_ml)
    if split:
        return s, np.abs(p_lm) + np.abs(p_ml), np.abs(q_lm) + np.abs(q_ml)
    return s


@dataclass(frozen=True)
class MismatchVectors:
    flow_mis: np.ndarray  # per branch, MVA
    inj_mis: np.ndarray  # per bus, MVA
    flow_p: np.ndarray
    flow_q: np.ndarray
    inj_p: np.ndarray
    inj_q: np.ndarray

    @staticmethod
    def _max(a) -> float:
        return float(a.max()) if a.size else 0.0

    @property
    def max_flow(self) -> float:
        return self._max(self.flow_mis)

    @property
    def max_inj(self) -> float:
        return self._max(self.inj_mis)


def mismatches(mats: SdpMatrices, W_star, W1, base_mva: float) -> MismatchVectors:
    f, fp, fq = flow_mismatch(mats, W_star, W1, base_mva, split=True)
    s, sp_, sq = injection_mismatch(mats, W_star, W1, base_mva, split=True)
    return MismatchVectors(f, s, fp, fq, sp_, sq)


def relaxation_gap(c_star: float, cost: float) -> float:
    """``(cost - c*) / c*``."""
    if not c_star > 0:
        raise ValueError("relaxation gap needs a positive lower bound")
    return (cost - c_star) / c_star


# ---------------------------------------------------------------------------
# settings, trace, result


@dataclass(frozen=True)
class AlgorithmSettings:
    delta: float = 0.005
    eps_flow: float = 1.0  # MVA
    eps_inj: float = 1.0  # MVA
    eps_V: float = 5e-4  # pu
    max_iter: int = 100
    outer_delta_step: Optional[float] = None
    outer_max: int = 10
    objective: str = "laplacian"
    qpen_eps_b: float = 0.0
    eliminate_reference: bool = True

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")
        if not min(self.eps_flow, self.eps_inj, self.eps_V) > 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 0 or self.outer_max < 0:
            raise ValueError("iteration limits must be nonnegative")
        if self.outer_delta_step is not None and not self.outer_delta_step > 0:
            raise ValueError("outer_delta_step must be positive when given")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.qpen_eps_b >= 0:
            raise ValueError("qpen_eps_b must be nonnegative")

    @property
    def tolerances(self) -> Tolerances:
        return Tolerances(eps_V=self.eps_V, eps_flow=self.eps_flow, eps_inj=self.eps_inj)


@dataclass
class IterationRecord:
    index: int
    weights: np.ndarray  # diag(D) used for this solve
    delta: float
    objective_kind: str
    status: str
    objective: float
    cost: float  # sum of alpha
    max_flow_mis: float
    argmax_flow: int
    max_inj_mis: float
    argmax_inj: int
    max_p_flow_mis: float
    max_q_flow_mis: float
    max_p_inj_mis: float
    max_q_inj_mis: float
    max_voltage_violation: float
    rank_ratio: float
    wall_time: float
    solver_iterations: int
    retried: bool = False

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.tolist()
        return d


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)

    def append(self, rec: IterationRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, k):
        return self.records[k]

    def as_list(self) -> list[dict]:
        return [r.as_dict() for r in self.records]


class Outcome(str, enum.Enum):
    CONVERGED = "converged"
    ITERATION_LIMIT = "iteration_limit"
    RELAXATION_INFEASIBLE = "relaxation_infeasible"
    SOLVER_FAILURE = "solver_failure"


@dataclass
class AlgorithmResult:
    outcome: Outcome
    c_star: float
    cost: float  # sum of alpha in the final relaxation solution (the capped quantity)
    gap_bound: float  # (cost - c*) / c*
    delta: float  # the cap fraction in force at the end
    trace: IterationTrace
    point: Optional[OperatingPoint] = None  # only when converged
    point_cost: float = math.nan  # cost of the recovered operating point
    feasibility: Optional[FeasibilityReport] = None
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.outcome is Outcome.CONVERGED

    @property
    def iterations(self) -> int:
        """Weighted (post-base) solves performed."""
        return max(0, len(self.trace) - 1)


# ---------------------------------------------------------------------------
# the loop


Sink = Callable[[dict], None]


class _SolverFailed(RuntimeError):
    pass


class _Infeasible(RuntimeError):
    pass


def _solve_with_retry(prob: RelaxationProblem, settings: SolverSettings):
    sealed = prob.conic.copy().seal()
    sol = solve(sealed, settings)
    retried = False
    if sol.status is SolveStatus.INFEASIBLE:
        return sol, retried
    if not sol.optimal:
        log.info("solve ended %s (residual %.2e, gap %.2e); retrying with relaxed tolerances",
                 sol.status.value, sol.primal_residual, sol.relative_gap)
        retried = True
        loose = settings.relaxed(10.0)
        if _meets(sol, loose):
            # the strict iterate already satisfies the relaxed tolerances; a
            # relaxed re-solve can stop at a worse point
            return dataclasses.replace(sol, status=SolveStatus.OPTIMAL), retried
        sol = solve(sealed, loose)
    return sol, retried


def _meets(sol, settings: SolverSettings) -> bool:
    dres = sol.info.get("dual_residual", math.nan)
    pairs = ((sol.primal_residual, settings.feas_tol), (dres, settings.feas_tol),
             (sol.relative_gap, settings.gap_tol))
    return all(math.isfinite(v) and v <= tol for v, tol in pairs)


@dataclass
class _Evaluated:
    lifted: LiftedSolution
    mis: MismatchVectors
    voltages: object
    feas: FeasibilityReport
    ratio: float


def _evaluate(prob: RelaxationProblem, sol, tol: Tolerances) -> _Evaluated:
    ls = LiftedSolution.from_conic(prob, sol)
    l1 = float(ls.eigenvalues[0])
    if l1 < 0:
        raise DegenerateSolution(f"largest eigenvalue {l1:.3e} is negative")
    eta = ls.eigenvectors[:, 0]
    W1 = l1 * np.outer(eta, eta)
    mis = mismatches(prob.mats, ls.W, W1, prob.case.base_mva)
    v = recover_voltages(ls)
    feas = check_feasibility(prob.case, prob.net, v, tol)
    return _Evaluated(ls, mis, v, feas, rank_metrics(ls)["ratio"])


def _terminated(ev: _Evaluated, s: AlgorithmSettings) -> bool:
    return (ev.mis.max_flow < s.eps_flow and ev.mis.max_inj < s.eps_inj
            and ev.feas.max_voltage_violation <= s.eps_V and ev.feas.passed)


def _record(index, weights, delta, kind, sol, ev: _Evaluated, wall, retried) -> IterationRecord:
    m = ev.mis
    am = lambda a: int(np.argmax(a)) if a.size else -1  # noqa: E731
    return IterationRecord(
        index=index, weights=np.array(weights, dtype=float), delta=delta, objective_kind=kind,
        status=sol.status.value, objective=float(sol.objective), cost=ev.lifted.cost,
        max_flow_mis=m.max_flow, argmax_flow=am(m.flow_mis), max_inj_mis=m.max_inj, argmax_inj=am(m.inj_mis),
        max_p_flow_mis=m._max(m.flow_p), max_q_flow_mis=m._max(m.flow_q),
        max_p_inj_mis=m._max(m.inj_p), max_q_inj_mis=m._max(m.inj_q),
        max_voltage_violation=ev.feas.max_voltage_violation, rank_ratio=ev.ratio, wall_time=wall,
        solver_iterations=sol.iterations, retried=retried)


def _failed_record(index, weights, delta, kind, sol, wall, retried) -> IterationRecord:
    nan = math.nan
    return IterationRecord(index, np.array(weights, dtype=float), delta, kind, sol.status.value,
                           float(sol.objective), nan, nan, -1, nan, -1, nan, nan, nan, nan, nan, nan, wall,
                           sol.iterations, retried)


def run_algorithm(case: CaseData, settings: AlgorithmSettings = AlgorithmSettings(),
                  solver: SolverSettings = SolverSettings(), sink: Sink | None = None,
                  net: NetworkMatrices | None = None) -> AlgorithmResult:
    """Run the weighted-Laplacian iteration on an (already preprocessed) case.

    Iteration 0 is the base relaxation with the cost objective. With
    ``settings.objective == "laplacian"`` every further iteration adds the
    branch flow mismatches to the weights and solves the Laplacian problem
    under the cost cap. ``"cost"`` stops after the base solve; ``"qpen"``
    performs one extra solve with the reactive-power penalty objective and
    no cap. A solve that does not reach ``optimal`` is retried once at 10x
    looser tolerances before the run is declared a solver failure.
    """
    net = build_admittance(case) if net is None else net
    emit = sink or (lambda ev: None)
    tol = settings.tolerances
    base = build_base_relaxation(case, net, eliminate_reference=settings.eliminate_reference)
    n_br = len(case.branches)
    trace = IterationTrace()
    delta = settings.delta

    def finish(outcome, c_star, ev: _Evaluated | None, message=""):
        cost = ev.lifted.cost if ev is not None else math.nan
        gap = relaxation_gap(c_star, cost) if (ev is not None and c_star > 0) else math.nan
        point = pcost = None
        if outcome is Outcome.CONVERGED:
            point = operating_point(case, net, ev.voltages)
            pcost = point.cost
        res = AlgorithmResult(outcome=outcome, c_star=c_star, cost=cost, gap_bound=gap, delta=delta, trace=trace,
                              point=point, point_cost=math.nan if pcost is None else pcost,
                              feasibility=ev.feas if ev is not None else None, message=message)
        emit({"event": "done", "outcome": outcome.value, "c_star": c_star, "cost": cost, "gap_bound": gap,
              "iterations": res.iterations})
        return res

    def step(prob, index, weights, kind):
        t0 = time.perf_counter()
        sol, retried = _solve_with_retry(prob, solver)
        wall = time.perf_counter() - t0
        if sol.status is SolveStatus.INFEASIBLE:
            trace.append(_failed_record(index, weights, delta, kind, sol, wall, retried))
            raise _Infeasible(f"iteration {index}: relaxation infeasible")
        if not sol.optimal:
            trace.append(_failed_record(index, weights, delta, kind, sol, wall, retried))
            raise _SolverFailed(f"iteration {index}: solver ended with {sol.status.value} "
                                f"(residual {sol.primal_residual:.2e}, gap {sol.relative_gap:.2e})")
        try:
            ev = _evaluate(prob, sol, tol)
        except DegenerateSolution as err:
            trace.append(_failed_record(index, weights, delta, kind, sol, wall, retried))
            raise _SolverFailed(f"iteration {index}: {err}") from err
        rec = _record(index, weights, delta, kind, sol, ev, wall, retried)
        trace.append(rec)
        emit({"event": "iteration", "iter": index, "objective_kind": kind, "status": rec.status,
              "objective": rec.objective, "cost": rec.cost, "max_flow_mis": rec.max_flow_mis,
              "max_inj_mis": rec.max_inj_mis, "rank_ratio": rec.rank_ratio, "delta": delta,
              "wall_time": wall})
        return sol, ev

    # D = 0: base relaxation for c* and the first mismatches
    D = np.zeros(n_br)
    try:
        sol, ev = step(base, 0, D, "cost")
    except _Infeasible as err:
        return finish(Outcome.RELAXATION_INFEASIBLE, math.nan, None, str(err))
    except _SolverFailed as err:
        return finish(Outcome.SOLVER_FAILURE, math.nan, None, str(err))
    c_star = float(sol.objective)
    if _terminated(ev, settings):
        return finish(Outcome.CONVERGED, c_star, ev)
    if settings.objective == "cost":
        return finish(Outcome.ITERATION_LIMIT, c_star, ev, "cost objective: no weighted iterations")

    if settings.objective == "qpen":
        prob = dataclasses.replace(base, conic=base.conic.copy())
        set_objective(prob, ReactivePenalty(settings.qpen_eps_b))
        try:
            _, ev2 = step(prob, 1, D, "qpen")
        except (_Infeasible, _SolverFailed) as err:
            return finish(Outcome.SOLVER_FAILURE, c_star, ev, str(err))
        ok = _terminated(ev2, settings) and relaxation_gap(c_star, ev2.lifted.cost) <= delta
        return finish(Outcome.CONVERGED if ok else Outcome.ITERATION_LIMIT, c_star, ev2)

    index = 0
    levels = 1 + (settings.outer_max if settings.outer_delta_step is not None else 0)
    for level in range(levels):
        if level > 0:
            delta += settings.outer_delta_step
            D = np.zeros(n_br)  # each delta level is a fresh instance
            emit({"event": "outer", "delta": delta})
        for _ in range(settings.max_iter):
            index += 1
            D = D + ev.mis.flow_mis
            prob = dataclasses.replace(base, conic=base.conic.copy())
            add_cost_cap(prob, c_star, delta)
            set_objective(prob, LaplacianObjective(D))
            try:
                sol, ev_new = step(prob, index, D, "laplacian")
            except _Infeasible as err:
                return finish(Outcome.SOLVER_FAILURE, c_star, ev, str(err))
            except _SolverFailed as err:
                return finish(Outcome.SOLVER_FAILURE, c_star, ev, str(err))
            ev = ev_new
            if _terminated(ev, settings):
                return finish(Outcome.CONVERGED, c_star, ev)
    return finish(Outcome.ITERATION_LIMIT, c_star, ev, f"no convergence after {index} weighted iterations")
