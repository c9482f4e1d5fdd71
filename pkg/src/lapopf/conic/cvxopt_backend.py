"""CVXOPT backend.

The IR problem (free scalars ``v`` plus a PSD matrix ``W``, affine
constraints in image form) is exactly the *dual* of CVXOPT's standard conic
LP::

    maximize    -h'z - b'y
    subject to  G'z + A'y + c = 0,   z in K

so ``y`` carries the IR scalars and ``z`` stacks inequality slacks (``'l'``),
the SOC vectors (``'q'``) and ``W`` itself (``'s'``). Each IR constraint row is
one CVXOPT primal variable. The KKT systems are solved by a structured
variant of ``cvxopt.misc.kkt_chol`` that never forms the dense ``d^2``-row
block of ``G``: the PSD contribution to ``G'W^{-1}W^{-T}G`` is
``tr(A_i X A_j X)`` with ``X = R^{-T}`` scaling, evaluated on the sparse
support of the constraint matrices.
"""
from __future__ import annotations

import contextlib
import io
import logging
import math
import re
import sys
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from cvxopt import matrix, misc, solvers, spmatrix

from .check import check_solution
from .ir import ConicProblem, ConicSolution, SolverSettings, SolveStatus, smat, svec_index, validate

log = logging.getLogger(__name__)

__all__ = ["solve", "compile_problem", "CompiledProblem"]

SQRT2 = math.sqrt(2.0)
# CVXOPT is asked for a gap this much tighter than the contract; the extra
# steps drive the spurious eigenvalues of W toward zero
_GAP_TARGET = 1e-2
# CVXOPT bounds a global 2-norm relative to |c|, the check here is per row
_FEAS_TARGET = 0.1
# near misses are left to the caller's relaxed retry; only clear failures walk
# the objective-scale ladder, each rung costing one or two full solves
_LADDER_SCORE = 5.0


@dataclass
class CompiledProblem:
    n_x: int  # CVXOPT primal variables, one per IR constraint component
    n_y: int  # IR scalars
    n_l: int
    cones: list[int]
    dim: int
    c: np.ndarray
    A: sp.csr_matrix  # n_y x n_x
    G_lq: sp.csr_matrix  # (n_l + sum cones) x n_x
    Gs: sp.csc_matrix  # svec(W)-coefficients, n_x x svec_len (IR scaling)
    b: np.ndarray  # objective on scalars
    C_svec: np.ndarray  # objective on svec(W)
    obj_const: float
    col_scale: np.ndarray = None  # IR scalar = col_scale * solver scalar
    obj_scale: float = 1.0  # IR objective = obj_scale * solver objective
    obj_norm: float = 1.0  # largest objective coefficient after column scaling

    @property
    def n_lq(self) -> int:
        return self.n_l + sum(self.cones)


def compile_problem(prob: ConicProblem, equilibrate: bool = True, objective_scale: float = 1.0) -> CompiledProblem:
    ns, nw, d = prob.n_scalars, prob.svec_len, prob.dim
    rows, consts = [], []
    slack_sign = []  # per component: 0 (equality/cone), +1 or -1 (slack)
    cone_rows = []

    for blk in prob.linear:
        R = prob.compiled_rows(blk.terms)
        eq = np.isfinite(blk.lo) & (blk.lo == blk.hi)
        has_lo = np.isfinite(blk.lo) & ~eq
        has_hi = np.isfinite(blk.hi) & ~eq
        for sel, bound, sign in ((eq, blk.lo, 0), (has_lo, blk.lo, -1), (has_hi, blk.hi, +1)):
            idx = np.flatnonzero(sel)
            if idx.size:
                rows.append(R[idx])
                consts.append(blk.const[idx] - bound[idx])
                slack_sign.append(np.full(idx.size, sign))
                cone_rows.append(np.full(idx.size, -1))
    q_off = 0
    cones = []
    for blk in prob.soc:
        R = prob.compiled_rows(blk.terms)
        rows.append(R)
        consts.append(blk.const.copy())
        slack_sign.append(np.zeros(R.shape[0], dtype=int))
        cone_rows.append(q_off + np.arange(R.shape[0]))
        q_off += R.shape[0]
        cones += [blk.size] * blk.count

    R = sp.vstack(rows, format="csr") if rows else sp.csr_matrix((0, ns + nw))
    c = np.concatenate(consts) if consts else np.zeros(0)
    sign = np.concatenate(slack_sign) if slack_sign else np.zeros(0, int)
    crow = np.concatenate(cone_rows) if cone_rows else np.zeros(0, int)
    n_x = R.shape[0]

    A = R[:, :ns].T.tocsr()
    Gs = R[:, ns:].tocsc()
    slack_cols = np.flatnonzero(sign != 0)
    n_l = slack_cols.size
    cone_cols = np.flatnonzero(crow >= 0)
    G_lq = sp.csr_matrix(
        (np.r_[sign[slack_cols].astype(float), -np.ones(cone_cols.size)],
         (np.r_[np.arange(n_l), n_l + crow[cone_cols]], np.r_[slack_cols, cone_cols])),
        shape=(n_l + q_off, n_x))

    if prob.objective is None:
        raise ValueError("problem has no objective")
    obj = prob.compiled_rows(prob.objective)
    objd = np.asarray(obj.todense()).ravel()
    cp = CompiledProblem(n_x=n_x, n_y=ns, n_l=n_l, cones=cones, dim=d, c=c, A=A, G_lq=G_lq, Gs=Gs,
                         b=objd[:ns], C_svec=objd[ns:], obj_const=prob.objective_const,
                         col_scale=np.ones(ns))
    if equilibrate:
        _equilibrate(cp, crow)
    if objective_scale != 1.0:
        cp.b = cp.b * objective_scale
        cp.C_svec = cp.C_svec * objective_scale
        cp.obj_scale /= objective_scale
    return cp


def _absmax(M, axis: int) -> np.ndarray:
    # scipy refuses reductions along an empty axis
    if M.shape[axis] == 0:
        return np.zeros(M.shape[1 - axis])
    return abs(M).max(axis=axis).toarray().ravel()


def _equilibrate(cp: CompiledProblem, crow: np.ndarray, passes: int = 8):
    """Ruiz scaling of constraint rows and scalar columns, then objective normalization.

    Matrix-block columns keep unit scale (the PSD cone is not diagonally
    rescaled); rows belonging to one second-order cone share a factor so cone
    membership is preserved; slacks absorb their row's factor.
    """
    n_x, ns = cp.n_x, cp.n_y
    # cone id per component (-1 = free-standing row)
    cone_id = np.full(n_x, -1)
    comp = np.flatnonzero(crow >= 0)
    if comp.size:
        starts = np.cumsum([0] + cp.cones[:-1])
        cone_id[comp] = np.searchsorted(starts, crow[comp], side="right") - 1
    r = np.ones(n_x)
    cs = np.ones(ns)
    At = cp.A.T.tocsr()  # n_x x ns
    for _ in range(passes):
        M = sp.diags(r) @ At @ sp.diags(cs)
        Gm = sp.diags(r) @ cp.Gs
        rown = np.maximum(_absmax(M, 1), _absmax(Gm, 1))
        if comp.size:
            cmax = np.zeros(len(cp.cones))
            np.maximum.at(cmax, cone_id[comp], rown[comp])
            rown[comp] = cmax[cone_id[comp]]
        rown[rown == 0] = 1.0
        r /= np.sqrt(rown)
        M = sp.diags(r) @ At @ sp.diags(cs)
        coln = _absmax(M, 0)
        coln[coln == 0] = 1.0
        cs /= np.sqrt(coln)
    cp.A = (sp.diags(cs) @ cp.A @ sp.diags(r)).tocsr()
    cp.Gs = (sp.diags(r) @ cp.Gs).tocsc()
    cp.c = r * cp.c
    cp.col_scale = cs
    b = cs * cp.b
    omega = max(np.abs(b).max(initial=0.0), np.abs(cp.C_svec).max(initial=0.0))
    if omega == 0:
        omega = 1.0
    cp.b = b / omega
    cp.C_svec = cp.C_svec / omega
    cp.obj_scale = omega
    cp.obj_norm = omega


# ---------------------------------------------------------------------------
# PSD-block helpers


class _PsdOperator:
    """Sparse view of the trace map ``i -> tr(A_i W)`` over the support of all ``A_i``."""

    def __init__(self, cp: CompiledProblem):
        d = cp.dim
        Gs = cp.Gs.tocoo()
        # svec position -> (p, q), p >= q
        jj, ii = _svec_pairs(d)
        p_all, q_all = ii[Gs.col], jj[Gs.col]
        used, inv = np.unique(Gs.col, return_inverse=True)
        self.up = ii[used]
        self.uq = jj[used]
        self.diag = self.up == self.uq
        nu = used.size
        # matrix entries of A_i (not svec-scaled)
        aval = np.where(p_all == q_all, Gs.data, Gs.data / SQRT2)
        self.E = sp.csr_matrix((aval, (Gs.row, inv)), shape=(cp.n_x, nu))  # A_i[u]
        self.T = sp.csr_matrix((np.where(p_all == q_all, aval, 2 * aval), (Gs.row, inv)),
                               shape=(cp.n_x, nu))  # tr(A_i S) = T @ S[u]
        self.d = d
        self.n_x = cp.n_x
        # dedupe identical columns (two-sided rows share A_i)
        E = self.E
        groups: dict = {}
        self.col_group = np.full(cp.n_x, -1)
        self.group_rep = []
        for i in range(cp.n_x):
            lo, hi = E.indptr[i], E.indptr[i + 1]
            if lo == hi:
                continue
            key = (E.indices[lo:hi].tobytes(), E.data[lo:hi].tobytes())
            g = groups.get(key)
            if g is None:
                g = len(self.group_rep)
                groups[key] = g
                self.group_rep.append(i)
            self.col_group[i] = g
        # per group: local index set and small dense block
        self.group_P = []
        self.group_A = []
        for i in self.group_rep:
            lo, hi = E.indptr[i], E.indptr[i + 1]
            u = E.indices[lo:hi]
            v = E.data[lo:hi]
            p, q = self.up[u], self.uq[u]
            P = np.unique(np.r_[p, q])
            loc = {k: t for t, k in enumerate(P)}
            Ab = np.zeros((P.size, P.size))
            for a, b_, val in zip(p, q, v):
                Ab[loc[a], loc[b_]] += val
                if a != b_:
                    Ab[loc[b_], loc[a]] += val
            self.group_P.append(P)
            self.group_A.append(Ab)
        self.has_psd = self.col_group >= 0

    def gram(self, X: np.ndarray) -> np.ndarray:
        """``H[i, j] = tr(A_i X A_j X)`` (symmetric ``X``)."""
        ng = len(self.group_rep)
        cols = np.zeros((self.T.shape[1], ng))
        up, uq = self.up, self.uq
        for g in range(ng):
            P, Ab = self.group_P[g], self.group_A[g]
            Xp = X[:, P]
            Tm = Xp @ Ab  # d x |P|
            cols[:, g] = np.einsum("ij,ij->i", Tm[up], Xp[uq])
        Hg = self.T @ cols  # n_x x ng : tr(A_i M_g)
        H = np.zeros((self.n_x, self.n_x))
        idx = np.flatnonzero(self.has_psd)
        H[np.ix_(np.arange(self.n_x), idx)] = Hg[:, self.col_group[idx]]
        return H

    def adjoint_traces(self, S: np.ndarray) -> np.ndarray:
        """``tr(A_i S)`` for every column (symmetric ``S``)."""
        return self.T @ S[self.up, self.uq]

    def combine(self, u: np.ndarray) -> np.ndarray:
        """Dense symmetric ``sum_i u_i A_i``."""
        vals = self.E.T @ u
        M = np.zeros((self.d, self.d))
        M[self.up, self.uq] = vals
        M[self.uq, self.up] = vals
        return M


def _svec_pairs(d: int):
    """For every svec position the column ``q`` and row ``p`` of the lower-triangle entry."""
    i, j = np.tril_indices(d)
    order = np.argsort(svec_index(i, j, d), kind="stable")
    return j[order], i[order]


def _sym_from_cvx(z, offset: int, d: int) -> np.ndarray:
    """Symmetric matrix from the lower triangle of a column-major ``'s'`` block."""
    Z = np.array(z[offset:offset + d * d]).reshape(d, d).T  # true (row, col) layout
    L = np.tril(Z)
    return L + np.tril(Z, -1).T


def _put_cvx(z, offset: int, M: np.ndarray):
    d = M.shape[0]
    z[offset:offset + d * d] = matrix(np.asfortranarray(M).ravel(order="F"))


class _KKT:
    def __init__(self, cp: CompiledProblem):
        self.cp = cp
        self.psd = _PsdOperator(cp)
        self.G_lq = cp.G_lq.toarray()
        self.dims_lq = {"l": cp.n_l, "q": list(cp.cones), "s": []}
        At = cp.A.T.toarray()  # n_x x n_y
        self.p = At.shape[1]
        if self.p:
            self.Q, R = sla.qr(At, mode="full")
            self.R = R[: self.p]
            if np.min(np.abs(np.diag(self.R))) < 1e-12 * max(1.0, np.abs(self.R).max()):
                raise ValueError("scalar variables are linearly dependent (rank(A) < p)")
        else:
            self.Q = np.eye(cp.n_x)
            self.R = np.zeros((0, 0))
        self.factorizations = 0

    def _lq_W(self, W):
        return {"d": W["d"], "di": W["di"], "v": W["v"], "beta": W["beta"], "r": [], "rti": []}

    def factor(self, W):
        cp = self.cp
        n, p, d = cp.n_x, self.p, cp.dim
        Wlq = self._lq_W(W)
        if self.G_lq.shape[0]:
            Gs = matrix(self.G_lq)
            misc.scale(Gs, Wlq, trans="T", inverse="I")
            Gs_lq = np.array(Gs)
        else:
            Gs_lq = np.zeros((0, n))
        rti = np.array(W["rti"][0])
        X = rti @ rti.T
        H = Gs_lq.T @ Gs_lq + self.psd.gram(X)
        H = 0.5 * (H + H.T)
        Q = self.Q
        K = Q.T @ H @ Q
        K = 0.5 * (K + K.T)
        try:
            L22 = sla.cho_factor(K[p:, p:], lower=True, check_finite=False)
        except np.linalg.LinAlgError as err:
            raise ArithmeticError("singular KKT system") from err
        self.factorizations += 1
        nl_q = self.G_lq.shape[0]
        off_s = nl_q

        def solve(x, y, z):
            bx = np.array(x).ravel()
            by = np.array(y).ravel() if p else np.zeros(0)
            # W^{-T} bz
            if nl_q:
                zlq = matrix(z[:nl_q])
                misc.scale(zlq, Wlq, trans="T", inverse="I")
                bz_lq = np.array(zlq).ravel()
            else:
                bz_lq = np.zeros(0)
            Bz = _sym_from_cvx(z, off_s, d)
            Bzs = rti.T @ Bz @ rti
            # bx + G' W^{-1} W^{-T} bz
            rhs = bx + Gs_lq.T @ bz_lq + self.psd.adjoint_traces(rti @ Bzs @ rti.T)
            t = Q.T @ rhs
            v = sla.solve_triangular(self.R, by, trans="T", lower=False) if p else np.zeros(0)
            w = sla.cho_solve(L22, t[p:] - K[p:, :p] @ v, check_finite=False)
            uy = sla.solve_triangular(self.R, t[:p] - K[:p, :p] @ v - K[:p, p:] @ w, lower=False) if p else v
            ux = Q @ np.r_[v, w]
            # W uz = W^{-T} (G ux - bz)
            out_lq = Gs_lq @ ux - bz_lq
            out_s = rti.T @ self.psd.combine(ux) @ rti - Bzs
            x[:] = matrix(ux)
            if p:
                y[:] = matrix(uy)
            if nl_q:
                z[:nl_q] = matrix(out_lq)
            _put_cvx(z, off_s, out_s)

        return solve


def _to_cvx(cp: CompiledProblem):
    d = cp.dim
    jj, ii = _svec_pairs(d)
    Gs = cp.Gs.tocoo()
    p, q = ii[Gs.col], jj[Gs.col]
    val = np.where(p == q, Gs.data, Gs.data / SQRT2)
    n_lq = cp.n_lq
    Glq = cp.G_lq.tocoo()
    rows = np.r_[Glq.row, n_lq + q * d + p].astype(int)  # column-major lower entry
    cols = np.r_[Glq.col, Gs.row].astype(int)
    vals = np.r_[Glq.data, val]
    G = spmatrix(vals.tolist(), rows.tolist(), cols.tolist(), (n_lq + d * d, cp.n_x))
    h = np.zeros(n_lq + d * d)
    C = smat(cp.C_svec, d)
    h[n_lq:] = np.tril(C).ravel(order="F")
    A = sp.coo_matrix(cp.A)
    Acvx = spmatrix(A.data.tolist(), A.row.tolist(), A.col.tolist(), (cp.n_y, cp.n_x))
    dims = {"l": cp.n_l, "q": list(cp.cones), "s": [d]}
    return matrix(cp.c), G, matrix(h), dims, Acvx, matrix(cp.b)


_PROGRESS = re.compile(r"^\s*(\d+):\s+(\S+)\s+(\S+)\s+(\S+)\s+(\S+)\s+(\S+)")


def _conelp(c, G, h, dims, A, b, kkt, opts, echo):
    """Run conelp with its progress table captured (and echoed when ``echo``)."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        res = solvers.conelp(c, G, h, dims, A, b, kktsolver=lambda W: kkt.factor(W),
                             options={**opts, "show_progress": True})
    text = buf.getvalue()
    if echo:
        sys.stdout.write(text)
    table = []
    for line in text.splitlines():
        m = _PROGRESS.match(line)
        if m:
            try:
                table.append((int(m.group(1)), *(float(g) for g in m.groups()[1:])))
            except ValueError:  # 'nan' columns etc. are skipped
                continue
    return res, table


def _replay_candidates(table, settings: SolverSettings, limit: int = 3) -> list[int]:
    """Iterations worth replaying to: latest rows within tolerance first, then the closest row."""
    scored = []
    for it, pcost, dcost, gap, pres, dres in table:
        rel = abs(gap) / max(abs(pcost), abs(dcost), 1e-300)
        scored.append((it, max(pres / settings.feas_tol, dres / settings.feas_tol, rel / settings.gap_tol)))
    out = [it for it, sc in reversed(scored) if sc <= 1.0][:limit]
    if scored:
        closest = min(scored, key=lambda r: r[1])[0]
        if closest not in out:
            out.append(closest)
    return out


@dataclass
class _Iterate:
    res: dict
    x: np.ndarray
    W: np.ndarray
    obj: float
    chk: object
    rel_gap: float
    dual_res: float

    def score(self, settings: SolverSettings) -> float:
        """Worst ratio of a residual to its tolerance (<= 1 means acceptable)."""
        vals = (self.chk.max_residual / settings.feas_tol, self.rel_gap / settings.gap_tol,
                self.dual_res / settings.feas_tol)
        return math.inf if any(math.isnan(v) for v in vals) else max(vals)


def _read_iterate(prob: ConicProblem, cp: CompiledProblem, res: dict, obj_scale: float) -> _Iterate:
    d = cp.dim
    W = _sym_from_cvx(res["z"], cp.n_lq, d)
    x = cp.col_scale * np.array(res["y"]).ravel() if cp.n_y else np.zeros(0)
    obj = prob.evaluate(x, W)["objective"]
    chk = check_solution(prob, x, W)
    gap = res.get("gap")
    rel_gap = math.nan
    if gap is not None and math.isfinite(obj):
        # invariant to any rescaling of the objective: relative to the optimal
        # value, or to the coefficient scale when the value is near zero
        rel_gap = abs(gap) * obj_scale / max(cp.obj_norm, abs(obj))
    dual_res = res.get("primal infeasibility")
    return _Iterate(res, x, W, obj, chk, rel_gap, math.nan if dual_res is None else float(dual_res))


def solve(prob: ConicProblem, settings: SolverSettings = SolverSettings()) -> ConicSolution:
    """Solve with CVXOPT; numerical failures are reported through ``status``.

    ``optimal`` requires the independently checked primal residual, CVXOPT's
    dual residual and the relative gap (in IR objective units) to be within
    ``settings``. CVXOPT often ends with 'unknown' (singular KKT) a few steps
    after an acceptable iterate; the run is then replayed up to the most
    promising rows of its progress table. If the result still misses the
    tolerances by more than a small factor, the objective is rescaled by the
    next factor of ``settings.scale_ladder`` and the solve is repeated. The
    best iterate found is returned.
    """
    issues = [m for m in validate(prob) if "not referenced" not in m]
    if issues:
        raise ValueError("malformed conic problem: " + "; ".join(issues))
    t0 = time.perf_counter()
    cp = compile_problem(prob)
    d = cp.dim
    nan_x = np.full(cp.n_y, np.nan)
    nan_W = np.full((d, d), np.nan)
    opts = {
        "maxiters": settings.max_iter,
        "abstol": 1e-12,
        "reltol": settings.gap_tol * _GAP_TARGET,
        "feastol": settings.feas_tol * _FEAS_TARGET,
        "refinement": settings.refinement,
    }
    try:
        kkt = _KKT(cp)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as err:
        return ConicSolution(SolveStatus.NUMERICAL_TROUBLE, nan_x, nan_W, math.nan,
                             solve_time=time.perf_counter() - t0, info={"error": str(err)})
    c, G, h, dims, A, b = _to_cvx(cp)
    h_np, b_np = np.array(h).ravel(), np.array(b).ravel()

    best = None  # (score, iterate, info, kappa)
    info = {}
    last_err = None
    scales = [settings.objective_scale] + [k for k in settings.scale_ladder if k != settings.objective_scale]
    for kappa in scales:
        hk, bk = matrix(h_np * kappa), matrix(b_np * kappa)
        obj_scale = cp.obj_scale / kappa
        try:
            res, table = _conelp(c, G, hk, dims, A, bk, kkt, opts, settings.verbose)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as err:
            log.info("conelp failed at objective scale %g: %s", kappa, err)
            last_err = err
            continue
        status = res["status"]
        info = {k: res.get(k) for k in ("status", "gap", "relative gap", "primal objective", "dual objective",
                                        "primal infeasibility", "dual infeasibility", "iterations")}
        info["objective_scale"] = kappa
        iters = int(res.get("iterations") or 0)
        if status == "dual infeasible":
            # a certificate that the IR problem (CVXOPT's dual) has no feasible point
            return ConicSolution(SolveStatus.INFEASIBLE, nan_x, nan_W, math.inf, iterations=iters,
                                 solve_time=time.perf_counter() - t0, info=info)
        if status == "primal infeasible":
            return ConicSolution(SolveStatus.NUMERICAL_TROUBLE, nan_x, nan_W, -math.inf, iterations=iters,
                                 solve_time=time.perf_counter() - t0, info={**info, "unbounded": True})
        it = _read_iterate(prob, cp, res, obj_scale)
        if it.score(settings) > 1.0:
            for target in _replay_candidates(table, settings, limit=2):
                if target >= iters:
                    continue
                log.info("replaying conelp to iteration %d of %d", target, iters)
                try:
                    res2, _ = _conelp(c, G, hk, dims, A, bk, kkt, {**opts, "maxiters": target}, False)
                except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                    break
                it2 = _read_iterate(prob, cp, res2, obj_scale)
                if it2.score(settings) < it.score(settings):
                    it = it2
                    info["replayed_to"] = target
                if it.score(settings) <= 1.0:
                    break
        sc = it.score(settings)
        if best is None or sc < best[0]:
            best = (sc, it, dict(info))
        if sc <= _LADDER_SCORE:
            break
        log.info("objective scale %g ended with score %.2e", kappa, sc)

    elapsed = time.perf_counter() - t0
    if best is None:
        return ConicSolution(SolveStatus.NUMERICAL_TROUBLE, nan_x, nan_W, math.nan, solve_time=elapsed,
                             info={"error": str(last_err)})
    sc, it, info = best
    iters = int(it.res.get("iterations") or 0)
    if sc <= 1.0:
        st = SolveStatus.OPTIMAL
    elif int(info.get("iterations") or 0) >= settings.max_iter:
        st = SolveStatus.ITERATION_LIMIT
    else:
        st = SolveStatus.NUMERICAL_TROUBLE
    info["check"] = it.chk.as_dict()
    info["dual_residual"] = it.dual_res
    return ConicSolution(st, it.x, it.W, it.obj, primal_residual=it.chk.max_residual, relative_gap=it.rel_gap,
                         iterations=iters, solve_time=elapsed, info=info)
