from .ir import (ConicProblem, ConicSolution, LinearBlock, SocBlock, SolverSettings, SolveStatus, Terms,
                 dump_triplets, smat, svec, trace_terms, validate)

__all__ = ["ConicProblem", "ConicSolution", "LinearBlock", "SocBlock", "SolverSettings", "SolveStatus", "Terms",
           "dump_triplets", "smat", "svec", "trace_terms", "validate", "solve", "check_solution"]


def __getattr__(name):
    # backend import is deferred so the IR works without a solver installed
    if name == "solve":
        from .cvxopt_backend import solve
        return solve
    if name == "check_solution":
        from .check import check_solution
        return check_solution
    raise AttributeError(name)
