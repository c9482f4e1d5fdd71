"""Command-line front end: ``lapopf solve | relax | trace``.

Exit codes: 0 converged (or relaxation solved), 1 I/O or parse error,
2 iteration limit, 3 infeasible relaxation, 4 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

from . import __version__
from .case_io import CaseData, CaseError, enforce_min_resistance, load_case, merge_low_impedance
from .conic import SolverSettings, SolveStatus, solve
from .laplacian import AlgorithmResult, AlgorithmSettings, Outcome, mismatches, run_algorithm
from .network import Tolerances, build_admittance, check_feasibility
from .sdp import DegenerateSolution, LiftedSolution, build_base_relaxation, rank_metrics, recover_voltages

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_ITER_LIMIT, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3, 4
OUTCOME_EXIT = {
    Outcome.CONVERGED: EXIT_OK,
    Outcome.ITERATION_LIMIT: EXIT_ITER_LIMIT,
    Outcome.RELAXATION_INFEASIBLE: EXIT_INFEASIBLE,
    Outcome.SOLVER_FAILURE: EXIT_SOLVER,
}
TRACE_COLUMNS = ("iter", "max_flow_mis_MVA", "max_inj_mis_MVA", "max_P_flow_mis", "max_Q_flow_mis",
                 "max_P_inj_mis", "max_Q_inj_mis", "objective")
REPORT_VERSION = "lapopf-report/1"


def report_schema() -> dict:
    """The JSON schema every report conforms to."""
    text = resources.files("lapopf").joinpath("data/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _num(x):
    """JSON-safe float (NaN and infinities become null)."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# pipeline pieces


def _prepare(path: str, args) -> tuple[CaseData, dict]:
    case = load_case(path)
    pre = {"buses_before": case.n_bus, "lines_before": case.n_branch, "thrshz": None, "min_r": None,
           "merged_groups": 0}
    if args.thrshz is not None:
        case, mlog = merge_low_impedance(case, args.thrshz)
        pre["thrshz"] = args.thrshz
        pre["merged_groups"] = len(mlog.merged)
    if args.min_r is not None:
        case = enforce_min_resistance(case, args.min_r)
        pre["min_r"] = args.min_r
    pre["buses_after"] = case.n_bus
    pre["lines_after"] = case.n_branch
    return case, pre


def _algorithm_settings(args) -> AlgorithmSettings:
    return AlgorithmSettings(delta=args.delta, eps_flow=args.eps_flow, eps_inj=args.eps_inj, eps_V=args.eps_v,
                             max_iter=args.max_iter, outer_delta_step=args.outer_delta_step,
                             objective=args.objective, qpen_eps_b=args.qpen_eps_b,
                             eliminate_reference=not args.no_eliminate_ref)


def _voltages(v) -> dict:
    return {"vd": v.vd.tolist(), "vq": v.vq.tolist(), "vm": v.magnitude.tolist(),
            "va_rad": np.angle(v.complex).tolist()}


def build_report(case: CaseData, pre: dict, settings: AlgorithmSettings, res: AlgorithmResult,
                 total_time: float, include_voltages: bool = False) -> dict:
    """RunReport dict; every number is taken from ``res`` as is."""
    base = case.base_mva
    last = res.trace[-1] if len(res.trace) else None
    mf = _num(last.max_flow_mis) if last is not None else None
    mi = _num(last.max_inj_mis) if last is not None else None
    rep = {
        "report_version": REPORT_VERSION,
        "command": "solve",
        "case": case.name,
        "base_mva": base,
        "preprocessing": pre,
        "settings": {
            "delta": settings.delta, "eps_flow_MVA": settings.eps_flow, "eps_inj_MVA": settings.eps_inj,
            "eps_V_pu": settings.eps_V, "max_iter": settings.max_iter,
            "outer_delta_step": settings.outer_delta_step, "objective": settings.objective,
            "qpen_eps_b": settings.qpen_eps_b, "eliminate_reference": settings.eliminate_reference,
        },
        "outcome": res.outcome.value,
        "message": res.message,
        "iterations": res.iterations,
        "max_flow_mismatch_MVA": mf,
        "max_injection_mismatch_MVA": mi,
        "per_unit": {
            "max_flow_mismatch_pu": None if mf is None else mf / base,
            "max_injection_mismatch_pu": None if mi is None else mi / base,
        },
        "delta": res.delta,
        "gap_bound_percent": None if _num(res.gap_bound) is None else 100.0 * res.gap_bound,
        "c_star": _num(res.c_star),
        "cost": _num(res.cost),
        "point_cost": _num(res.point_cost),
        "feasibility": res.feasibility.as_dict() if res.feasibility is not None else None,
        "wall_times": {"solves": [r.wall_time for r in res.trace], "total": total_time},
        "trace": [_trace_entry(r) for r in res.trace],
        "version": __version__,
    }
    if include_voltages and res.point is not None:
        rep["voltages"] = _voltages(res.point.voltages)
    return rep


def _trace_entry(r) -> dict:
    return {
        "iter": r.index, "objective_kind": r.objective_kind, "status": r.status, "delta": r.delta,
        "objective": _num(r.objective), "cost": _num(r.cost),
        "max_flow_mis_MVA": _num(r.max_flow_mis), "argmax_flow": r.argmax_flow,
        "max_inj_mis_MVA": _num(r.max_inj_mis), "argmax_inj": r.argmax_inj,
        "max_P_flow_mis": _num(r.max_p_flow_mis), "max_Q_flow_mis": _num(r.max_q_flow_mis),
        "max_P_inj_mis": _num(r.max_p_inj_mis), "max_Q_inj_mis": _num(r.max_q_inj_mis),
        "max_voltage_violation_pu": _num(r.max_voltage_violation), "rank_ratio": _num(r.rank_ratio),
        "wall_time": r.wall_time, "solver_iterations": r.solver_iterations, "retried": r.retried,
        "weights": [float(w) for w in r.weights],
    }


def write_trace_csv(trace: list[dict], fh) -> int:
    """Write the per-iteration CSV; returns the number of data rows."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow(["%d" % r["iter"]] + ["" if r.get(c) is None else repr(float(r[c])) for c in TRACE_COLUMNS[1:]])
    return len(trace)


def _write_json(obj, path: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _out_path(target: str | None, case_path: str, suffix: str, batch: bool) -> str | None:
    if target is None:
        return None
    if not batch:
        return target
    stem = os.path.splitext(os.path.basename(case_path))[0]
    return os.path.join(target, stem + suffix)


# ---------------------------------------------------------------------------
# commands


def _progress(args):
    if args.quiet:
        return None

    def sink(ev):
        if ev["event"] == "iteration":
            print(f"  iter {ev['iter']:3d} [{ev['objective_kind']}] {ev['status']}: "
                  f"flow mis {ev['max_flow_mis']:.3e} MVA, inj mis {ev['max_inj_mis']:.3e} MVA, "
                  f"cost {ev['cost']:.6f}, rank ratio {ev['rank_ratio']:.1e} ({ev['wall_time']:.1f}s)",
                  file=sys.stderr, flush=True)
        elif ev["event"] == "outer":
            print(f"  raising delta to {ev['delta']:.4f}", file=sys.stderr, flush=True)
    return sink


def _solve_one(path: str, args, batch: bool = False) -> int:
    t0 = time.perf_counter()
    try:
        case, pre = _prepare(path, args)
        settings = _algorithm_settings(args)
    except (OSError, CaseError, ValueError) as err:
        print(f"error: {path}: {err}", file=sys.stderr)
        return EXIT_ERROR
    try:
        res = run_algorithm(case, settings, SolverSettings(), sink=_progress(args))
    except (CaseError, ValueError) as err:  # e.g. several generators on one bus
        print(f"error: {path}: {err}", file=sys.stderr)
        return EXIT_ERROR
    rep = build_report(case, pre, settings, res, time.perf_counter() - t0, include_voltages=args.voltages)
    rp = _out_path(args.report, path, ".json", batch)
    if rp:
        _write_json(rep, rp)
    tp = _out_path(args.trace, path, ".csv", batch)
    if tp:
        os.makedirs(os.path.dirname(os.path.abspath(tp)), exist_ok=True)
        with open(tp, "w", encoding="utf-8", newline="") as fh:
            write_trace_csv(rep["trace"], fh)
    gap = rep["gap_bound_percent"]
    print(f"{case.name}: {res.outcome.value} after {res.iterations} weighted iteration(s); "
          f"c* = {res.c_star:.6f}, cost = {res.cost:.6f}, gap bound = "
          f"{'n/a' if gap is None else f'{gap:.4f}%'} (delta {100 * res.delta:.3f}%)")
    if res.message:
        print(f"  {res.message}")
    return OUTCOME_EXIT[res.outcome]


def cmd_solve(args) -> int:
    paths = args.case
    batch = len(paths) > 1
    if args.jobs > 1 and batch:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            codes = list(ex.map(_solve_one, paths, [args] * len(paths), [True] * len(paths)))
    else:
        codes = [_solve_one(p, args, batch) for p in paths]
    return max(codes)


def relax_report(case: CaseData, pre: dict, eliminate_reference: bool = True, tol: Tolerances = Tolerances(),
                 solver: SolverSettings = SolverSettings(), include_voltages: bool = False) -> tuple[dict, int]:
    t0 = time.perf_counter()
    net = build_admittance(case)
    prob = build_base_relaxation(case, net, eliminate_reference=eliminate_reference)
    sealed = prob.conic.copy().seal()
    sol = solve(sealed, solver)
    if not sol.optimal and sol.status is not SolveStatus.INFEASIBLE:
        sol = solve(sealed, solver.relaxed(10.0))
    rep = {"report_version": REPORT_VERSION, "command": "relax", "case": case.name, "base_mva": case.base_mva,
           "preprocessing": pre, "status": sol.status.value, "c_star": None, "rank": None,
           "feasibility": None, "max_flow_mismatch_MVA": None, "max_injection_mismatch_MVA": None,
           "solver": {"iterations": sol.iterations, "primal_residual": _num(sol.primal_residual),
                      "relative_gap": _num(sol.relative_gap), "solve_time": sol.solve_time},
           "version": __version__}
    if sol.status is SolveStatus.INFEASIBLE:
        code = EXIT_INFEASIBLE
    elif not sol.optimal:
        code = EXIT_SOLVER
    else:
        code = EXIT_OK
        ls = LiftedSolution.from_conic(prob, sol)
        rm = rank_metrics(ls)
        rep["c_star"] = sol.objective
        rep["rank"] = {"lambda1": rm["lambda1"], "lambda2": rm["lambda2"], "ratio": rm["ratio"],
                       "rank_one": bool(rm["rank_one"])}
        try:
            v = recover_voltages(ls)
            rep["feasibility"] = check_feasibility(case, net, v, tol).as_dict()
            W1 = ls.eigenvalues[0] * np.outer(ls.eigenvectors[:, 0], ls.eigenvectors[:, 0])
            m = mismatches(prob.mats, ls.W, W1, case.base_mva)
            rep["max_flow_mismatch_MVA"] = m.max_flow
            rep["max_injection_mismatch_MVA"] = m.max_inj
            if include_voltages:
                rep["voltages"] = _voltages(v)
        except DegenerateSolution as err:
            rep["message"] = str(err)
    rep["wall_time"] = time.perf_counter() - t0
    return rep, code


def cmd_relax(args) -> int:
    codes = []
    batch = len(args.case) > 1
    for path in args.case:
        try:
            case, pre = _prepare(path, args)
            tol = Tolerances(eps_V=args.eps_v, eps_flow=args.eps_flow, eps_inj=args.eps_inj)
            rep, code = relax_report(case, pre, not args.no_eliminate_ref, tol, include_voltages=args.voltages)
        except (OSError, CaseError, ValueError) as err:
            print(f"error: {path}: {err}", file=sys.stderr)
            codes.append(EXIT_ERROR)
            continue
        print(f"{case.name}: status {rep['status']}")
        if rep["c_star"] is not None:
            print(f"  c* = {rep['c_star']:.6f}")
            print(f"  lambda2/lambda1 = {rep['rank']['ratio']:.3e}")
            print(f"  numerically rank-one: {'true' if rep['rank']['rank_one'] else 'false'}")
            if rep["feasibility"] is not None:
                print(f"  recovered point feasible: {'true' if rep['feasibility']['passed'] else 'false'}")
        rp = _out_path(args.report, path, ".json", batch)
        if rp:
            _write_json(rep, rp)
        codes.append(code)
    return max(codes)


def cmd_trace(args) -> int:
    if args.report_in is not None:
        try:
            with open(args.report_in, encoding="utf-8") as fh:
                rep = json.load(fh)
        except (OSError, ValueError) as err:
            print(f"error: {args.report_in}: {err}", file=sys.stderr)
            return EXIT_ERROR
        trace = rep.get("trace")
        if not trace:
            print(f"error: {args.report_in} has no trace", file=sys.stderr)
            return EXIT_ERROR
        code = EXIT_OK
    else:
        if not args.case:
            print("error: give a case file or --from-report", file=sys.stderr)
            return EXIT_ERROR
        try:
            case, pre = _prepare(args.case, args)
            settings = _algorithm_settings(args)
            res = run_algorithm(case, settings, sink=_progress(args))
        except (OSError, CaseError, ValueError) as err:
            print(f"error: {args.case}: {err}", file=sys.stderr)
            return EXIT_ERROR
        trace = [_trace_entry(r) for r in res.trace]
        code = OUTCOME_EXIT[res.outcome]
    if args.out in (None, "-"):
        buf = io.StringIO()
        write_trace_csv(trace, buf)
        sys.stdout.write(buf.getvalue())
    else:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_trace_csv(trace, fh)
    return code


# ---------------------------------------------------------------------------
# argument parsing


def _add_preprocessing(p):
    p.add_argument("--thrshz", type=float, default=None,
                   help="merge buses joined by branches with |z| below this (pu); off unless given")
    p.add_argument("--min-r", type=float, default=None, help="minimum branch resistance (pu)")
    p.add_argument("--no-eliminate-ref", action="store_true",
                   help="keep the reference vq in the matrix and constrain it to zero instead")
    p.add_argument("--eps-flow", type=float, default=1.0, help="flow mismatch tolerance (MVA)")
    p.add_argument("--eps-inj", type=float, default=1.0, help="injection mismatch tolerance (MVA)")
    p.add_argument("--eps-v", type=float, default=5e-4, help="voltage limit tolerance (pu)")
    p.add_argument("--voltages", action="store_true", help="include recovered voltages in the report")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-iteration progress on stderr")


def _add_algorithm(p):
    p.add_argument("--delta", type=float, default=0.005, help="cost cap as a fraction above c* (default 0.005)")
    p.add_argument("--max-iter", type=int, default=100, help="weighted iterations per delta level")
    p.add_argument("--objective", choices=("laplacian", "cost", "qpen"), default="laplacian")
    p.add_argument("--qpen-eps-b", type=float, default=0.0, help="reactive penalty weight for --objective qpen")
    p.add_argument("--outer-delta-step", type=float, default=None,
                   help="raise delta by this much and restart when the inner loop hits --max-iter")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lapopf", description="OPF via SDP relaxation and Laplacian weights")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run the weighted-Laplacian iteration")
    s.add_argument("case", nargs="+", help="case file(s), .m or .json")
    _add_preprocessing(s)
    _add_algorithm(s)
    s.add_argument("--report", help="report JSON path (a directory when several cases are given)")
    s.add_argument("--trace", help="trace CSV path (a directory when several cases are given)")
    s.add_argument("--jobs", type=int, default=1, help="cases solved concurrently")
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("relax", help="solve the base relaxation only")
    r.add_argument("case", nargs="+")
    _add_preprocessing(r)
    r.add_argument("--report", help="report JSON path (a directory when several cases are given)")
    r.set_defaults(func=cmd_relax)

    t = sub.add_parser("trace", help="per-iteration mismatch CSV")
    t.add_argument("case", nargs="?", help="case to run inline (omit with --from-report)")
    t.add_argument("--from-report", dest="report_in", help="read the trace from a solve report")
    t.add_argument("-o", "--out", help="CSV path (default stdout)")
    _add_preprocessing(t)
    _add_algorithm(t)
    t.set_defaults(func=cmd_trace)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
