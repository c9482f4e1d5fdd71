"""Lifted (rank-relaxed) OPF: trace matrices, relaxation assembly, recovery.

With ``x = [vd; vq]`` and ``W = x x^T`` every power-flow quantity is a trace
``tr(A W)`` for a sparse real symmetric ``2n x 2n`` matrix ``A``. The matrix
families are kept as COO triplets over the full ``2n`` index space; the
reference-eliminated view drops index ``n + ref`` (the reference ``vq``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np
import scipy.sparse as sp

from .case_io import CaseData
from .conic.ir import ConicProblem, Terms, trace_terms
from .network import NetworkMatrices, VoltageVector, bus_limits

__all__ = [
    "SdpMatrices",
    "MatrixFamily",
    "CostObjective",
    "LaplacianObjective",
    "ReactivePenalty",
    "RelaxationProblem",
    "LiftedSolution",
    "DegenerateSolution",
    "build_matrices",
    "build_base_relaxation",
    "set_objective",
    "add_cost_cap",
    "laplacian_matrix",
    "qpen_matrix",
    "recover_voltages",
    "rank_metrics",
    "lift_point",
    "RANK_ONE_RATIO",
]

RANK_ONE_RATIO = 1e-5


class DegenerateSolution(ValueError):
    """Largest eigenvalue of the lifted matrix is not positive."""


# ---------------------------------------------------------------------------
# matrix families


@dataclass(frozen=True)
class MatrixFamily:
    """``count`` symmetric matrices of size ``dim`` stored as COO triplets."""

    count: int
    dim: int
    fam: np.ndarray
    i: np.ndarray
    j: np.ndarray
    val: np.ndarray

    @classmethod
    def from_triplets(cls, count, dim, fam, i, j, val) -> "MatrixFamily":
        # canonicalize: merge duplicates, drop explicit zeros
        key = (np.asarray(fam, np.int64) * dim + np.asarray(i, np.int64)) * dim + np.asarray(j, np.int64)
        uniq, inv = np.unique(key, return_inverse=True)
        v = np.zeros(uniq.size)
        np.add.at(v, inv, np.asarray(val, float))
        keep = v != 0.0
        uniq, v = uniq[keep], v[keep]
        f, rem = np.divmod(uniq, dim * dim)
        ii, jj = np.divmod(rem, dim)
        return cls(count, dim, f, ii, jj, v)

    def matrix(self, k: int) -> sp.csr_matrix:
        sel = self.fam == k
        return sp.csr_matrix((self.val[sel], (self.i[sel], self.j[sel])), shape=(self.dim, self.dim))

    def __getitem__(self, k: int) -> sp.csr_matrix:
        return self.matrix(k)

    def __len__(self) -> int:
        return self.count

    @cached_property
    def stacked(self) -> sp.csr_matrix:
        """(count x dim^2) operator so that ``stacked @ W.ravel()`` gives all traces."""
        return sp.csr_matrix((self.val, (self.fam, self.i * self.dim + self.j)),
                             shape=(self.count, self.dim * self.dim))

    def traces(self, W: np.ndarray) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        if W.shape != (self.dim, self.dim):
            raise ValueError(f"expected a {self.dim}x{self.dim} matrix, got {W.shape}")
        return self.stacked @ W.ravel()

    def quad(self, x: np.ndarray) -> np.ndarray:
        """``x^T A_k x`` for every member, without forming ``x x^T``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(self.count)
        np.add.at(out, self.fam, self.val * x[self.i] * x[self.j])
        return out

    def reduce(self, drop: int) -> "MatrixFamily":
        keep = (self.i != drop) & (self.j != drop)
        i = self.i[keep]
        j = self.j[keep]
        return MatrixFamily(self.count, self.dim - 1, self.fam[keep],
                            i - (i > drop), j - (j > drop), self.val[keep])

    def terms(self, n_scalars: int = 0) -> Terms:
        lower = self.i >= self.j
        f, i, j, v = self.fam[lower], self.i[lower], self.j[lower], self.val[lower]
        return Terms.build(self.count, n_scalars, mrow=f, mi=i, mj=j,
                           mval=np.where(i == j, v, math.sqrt(2.0) * v))

    def select(self, members) -> "MatrixFamily":
        members = np.asarray(members, dtype=int)
        remap = np.full(self.count, -1)
        remap[members] = np.arange(members.size)
        keep = remap[self.fam] >= 0
        return MatrixFamily(members.size, self.dim, remap[self.fam[keep]],
                            self.i[keep], self.j[keep], self.val[keep])


@dataclass(frozen=True)
class SdpMatrices:
    """Trace-matrix families for one network.

    ``Y``/``Ybar``/``M``/``N`` have one member per bus, ``Zlm``/``Zbar_lm``/
    ``Zml``/``Zbar_ml`` one per branch. ``dim`` is ``2n`` or ``2n-1``.
    """

    n: int
    ref: int
    reduced: bool
    Y: MatrixFamily
    Ybar: MatrixFamily
    M: MatrixFamily
    N: MatrixFamily
    Zlm: MatrixFamily
    Zbar_lm: MatrixFamily
    Zml: MatrixFamily
    Zbar_ml: MatrixFamily
    c_lm: np.ndarray
    c_ml: np.ndarray
    s_lm: np.ndarray
    s_ml: np.ndarray

    FAMILIES = ("Y", "Ybar", "M", "N", "Zlm", "Zbar_lm", "Zml", "Zbar_ml")

    @property
    def dim(self) -> int:
        return self.Y.dim

    @property
    def drop_index(self) -> int:
        return self.n + self.ref

    def eliminate_reference(self) -> "SdpMatrices":
        if self.reduced:
            return self
        d = self.drop_index
        fams = {name: getattr(self, name).reduce(d) for name in self.FAMILIES}
        return SdpMatrices(self.n, self.ref, True, c_lm=self.c_lm, c_ml=self.c_ml,
                           s_lm=self.s_lm, s_ml=self.s_ml, **fams)

    def reduce_vector(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.delete(x, self.drop_index) if self.reduced else x

    def expand_vector(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.insert(x, self.drop_index, 0.0) if self.reduced else x

    def reduce_matrix(self, A) -> sp.csr_matrix:
        """Delete the reference-``vq`` row/column of a full-size matrix (no-op when unreduced)."""
        A = sp.csr_matrix(A)
        if not self.reduced:
            return A
        keep = np.delete(np.arange(2 * self.n), self.drop_index)
        return A[keep][:, keep].tocsr()


def _realify(fam, r, c, y, n):
    """Triplets of the two real forms built from complex ``E = sum y e_r e_c^T``.

    Returns ``(P, Q)`` triplet lists for
    ``1/2 [Re(E+E^T), Im(E^T-E); Im(E-E^T), Re(E+E^T)]`` and
    ``-1/2 [Im(E+E^T), Re(E-E^T); Re(E^T-E), Im(E+E^T)]``.
    """
    a, b = 0.5 * y.real, 0.5 * y.imag
    P_i = np.concatenate([r, c, r + n, c + n, c, r + n, r, c + n])
    P_j = np.concatenate([c, r, c + n, r + n, r + n, c, c + n, r])
    P_v = np.concatenate([a, a, a, a, b, b, -b, -b])
    Q_v = np.concatenate([-b, -b, -b, -b, a, a, -a, -a])
    fam8 = np.tile(fam, 8)
    return (fam8, P_i, P_j, P_v), (fam8, P_i, P_j, Q_v)


def _sym_pairs(fam, pairs, n2):
    """Triplets for ``sum w (f_p f_q^T + f_q f_p^T)``; diagonal pairs counted once each."""
    fs, ii, jj, vv = [], [], [], []
    for p, q, w in pairs:
        fs.append(fam)
        ii.append(p)
        jj.append(q)
        vv.append(w)
        off = p != q
        fs.append(fam[off])
        ii.append(q[off])
        jj.append(p[off])
        vv.append(w[off])
    return tuple(np.concatenate(x) for x in (fs, ii, jj, vv))


def build_matrices(case: CaseData, net: NetworkMatrices, eliminate_reference: bool = False) -> SdpMatrices:
    """All trace-matrix families in the full ``2n`` space (optionally reduced)."""
    n = net.n
    n2 = 2 * n
    ref = case.reference_index

    # bus injections: Y_k = e_k e_k^T Y keeps row k of Y
    Yc = net.Y.tocoo()
    P, Q = _realify(Yc.row, Yc.row, Yc.col, Yc.data, n)
    Yfam = MatrixFamily.from_triplets(n, n2, *P)
    Ybar = MatrixFamily.from_triplets(n, n2, *Q)

    k = np.arange(n)
    Mfam = MatrixFamily.from_triplets(n, n2, np.r_[k, k], np.r_[k, k + n], np.r_[k, k + n], np.ones(n2))
    Nfam = MatrixFamily.from_triplets(n, n2, k, k + n, k + n, np.ones(n))

    br = net.branches
    nl = br.f.size
    l, m = br.f, br.t
    g, b, bsh, tau, th = br.g, br.b, br.b_sh, br.tau, br.theta
    cos, sin = np.cos(th), np.sin(th)
    c_lm = (g * cos - b * sin) / (2 * tau)
    c_ml = (g * cos + b * sin) / (2 * tau)
    s_lm = (g * sin + b * cos) / (2 * tau)
    s_ml = (g * sin - b * cos) / (2 * tau)
    e = np.arange(nl)
    ln, mn = l + n, m + n

    def family(pairs):
        return MatrixFamily.from_triplets(nl, n2, *_sym_pairs(e, pairs, n2))

    # each (p, q, w) contributes w (f_p f_q^T + f_q f_p^T); a diagonal term w f_p f_p^T is (p, p, w)
    cross = lambda w: [(l, m, w), (ln, mn, w)]  # f_l f_m^T + f_m f_l^T + f_{l+n} f_{m+n}^T + ...
    skew_a = lambda w: [(l, mn, w), (ln, m, -w)]  # f_l f_{m+n}^T + f_{m+n} f_l^T - f_{l+n} f_m^T - f_m f_{l+n}^T
    Zlm = family([(l, l, g / tau**2), (ln, ln, g / tau**2)] + cross(-c_lm) + skew_a(s_lm))
    Zml = family([(m, m, g), (mn, mn, g)] + cross(-c_ml) + skew_a(s_ml))
    dl = -(2 * b + bsh) / (2 * tau**2)
    Zbar_lm = family([(l, l, dl), (ln, ln, dl)] + skew_a(c_lm) + cross(s_lm))
    dm = -(b + bsh / 2)
    Zbar_ml = family([(m, m, dm), (mn, mn, dm)] + skew_a(-c_ml) + cross(-s_ml))

    mats = SdpMatrices(n, ref, False, Yfam, Ybar, Mfam, Nfam, Zlm, Zbar_lm, Zml, Zbar_ml,
                       c_lm, c_ml, s_lm, s_ml)
    return mats.eliminate_reference() if eliminate_reference else mats


def laplacian_matrix(case: CaseData, net: NetworkMatrices, weights) -> sp.csr_matrix:
    """``blkdiag(L, L)`` with ``L = A^T diag(weights) A`` (``2n x 2n``)."""
    w = np.asarray(weights, dtype=float)
    br = net.branches
    if w.shape != br.f.shape:
        raise ValueError(f"expected {br.f.size} branch weights, got {w.size}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("Laplacian weights must be finite and nonnegative")
    n, nl = net.n, br.f.size
    A = sp.csr_matrix((np.r_[np.ones(nl), -np.ones(nl)], (np.r_[np.arange(nl), np.arange(nl)], np.r_[br.f, br.t])),
                      shape=(nl, n))
    L = (A.T @ sp.diags(w) @ A).tocsr()
    return sp.block_diag([L, L], format="csr")


def qpen_matrix(net: NetworkMatrices) -> sp.csr_matrix:
    """Real form of ``H = (Y^H - Y) / 2j``, whose trace against ``W = x x^T`` is the
    total reactive injection ``x^H H x``."""
    Y = net.Y.tocsr()
    H = (Y.conj().T - Y) / 2j
    Hr, Hi = H.real, H.imag
    return sp.bmat([[Hr, -Hi], [Hi, Hr]], format="csr")


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class CostObjective:
    kind: str = "cost"


@dataclass(frozen=True)
class LaplacianObjective:
    weights: np.ndarray
    kind: str = "laplacian"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("Laplacian weights must be finite and nonnegative")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class ReactivePenalty:
    eps_b: float
    kind: str = "qpen"

    def __post_init__(self):
        if not (self.eps_b >= 0):
            raise ValueError("eps_b must be nonnegative")


Objective = Union[CostObjective, LaplacianObjective, ReactivePenalty]


# ---------------------------------------------------------------------------
# relaxation


@dataclass
class RelaxationProblem:
    """Conic program plus the bookkeeping to map solutions back to the network."""

    case: CaseData
    net: NetworkMatrices
    mats: SdpMatrices  # in the indexing of the PSD block
    conic: ConicProblem
    pg_index: np.ndarray  # per bus: scalar index of P_G, -1 at buses without a generator
    alpha_index: np.ndarray  # per generator
    gen_bus: np.ndarray  # per generator: bus position
    flow_branches: np.ndarray  # limited branches, in cone order (two cones each)
    alpha_scale: np.ndarray  # per generator: alpha_k = alpha_scale[k] * (IR scalar)
    objective: Objective = field(default_factory=CostObjective)
    cost_cap: tuple[float, float] | None = None

    @property
    def eliminated(self) -> bool:
        return self.mats.reduced

    @property
    def dim(self) -> int:
        return self.conic.dim

    def reference_map(self) -> np.ndarray:
        """Original ``2n`` index -> PSD block index (``-1`` for the eliminated entry)."""
        full = np.arange(2 * self.mats.n)
        if not self.eliminated:
            return full
        d = self.mats.drop_index
        out = full - (full > d)
        out[d] = -1
        return out

    def n_flow_cones(self) -> int:
        return 2 * self.flow_branches.size


def _gen_map(case: CaseData):
    idx = case.bus_index
    gen_bus = np.array([idx[g.bus] for g in case.gens], dtype=int)
    if np.unique(gen_bus).size != gen_bus.size:
        dup = [case.gens[i].bus for i in range(gen_bus.size) if np.sum(gen_bus == gen_bus[i]) > 1]
        raise ValueError(f"more than one generator at bus {dup[0]}; aggregate generators first")
    return gen_bus


def _cost_units(case: CaseData) -> np.ndarray:
    """Per-generator currency unit: the cost magnitude at the largest output."""
    out = []
    for g in case.gens:
        p = max(abs(g.pmin), abs(g.pmax)) or 1.0
        out.append(max(1.0, g.c2 * p * p + abs(g.c1) * p + abs(g.c0)))
    return np.array(out)


def build_base_relaxation(case: CaseData, net: NetworkMatrices, mats: SdpMatrices | None = None,
                          eliminate_reference: bool = True, scale_costs: bool = True) -> RelaxationProblem:
    """Cost-minimizing relaxation with every network constraint.

    The rotated-cone cost epigraph is written in the printed form for a cost
    measured in units of ``sigma_k`` per generator (``scale_costs``; with
    ``scale_costs=False`` every ``sigma_k = 1`` and the cone is literally
    ``(1 - c1 P - c0 + alpha, 1 + c1 P + c0 - alpha, 2 sqrt(c2) P)``). The
    feasible set in ``(P, alpha)`` is the same for every positive ``sigma``.
    """
    if mats is None:
        mats = build_matrices(case, net)
    mats = mats.eliminate_reference() if eliminate_reference else mats
    if not eliminate_reference and mats.reduced:
        raise ValueError("explicit reference constraint needs unreduced matrices")
    n = mats.n
    gen_bus = _gen_map(case)
    ng = gen_bus.size
    prob = ConicProblem(mats.dim)

    pg_index = np.full(n, -1)
    pg_index[gen_bus] = prob.add_scalars(f"P_G[{case.gens[i].bus}]" for i in range(ng))
    alpha_index = prob.add_scalars(f"alpha[{case.gens[i].bus}]" for i in range(ng))
    ns = prob.n_scalars

    pd = np.array([bus.p_load for bus in case.buses])
    qd = np.array([bus.q_load for bus in case.buses])
    lim = bus_limits(case)
    labels = [str(bus.id) for bus in case.buses]

    # P_G,k = tr(Y_k W) + P_Dk  ->  tr(Y_k W) - P_G,k + P_Dk = 0 at generator buses;
    # elsewhere P_G is identically zero so the row is tr(Y_k W) + P_Dk = 0
    Yt = mats.Y.terms(ns)
    S = sp.csr_matrix((-np.ones(ng), (gen_bus, pg_index[gen_bus])), shape=(n, ns))
    prob.add_linear("p_balance", Terms(S, Yt.mrow, Yt.mi, Yt.mj, Yt.mval), const=pd, lo=0.0, hi=0.0,
                    labels=labels)
    prob.add_linear("p_limits", Terms.build(ng, ns, np.arange(ng), pg_index[gen_bus], np.ones(ng)),
                    lo=lim["pmin"][gen_bus], hi=lim["pmax"][gen_bus], labels=[labels[k] for k in gen_bus])
    prob.add_linear("q_limits", mats.Ybar.terms(ns), const=qd, lo=lim["qmin"], hi=lim["qmax"], labels=labels)
    vmin = np.array([bus.vmin for bus in case.buses])
    vmax = np.array([bus.vmax for bus in case.buses])
    prob.add_linear("v_limits", mats.M.terms(ns), lo=vmin**2, hi=vmax**2, labels=labels)
    if not mats.reduced:
        prob.add_linear("v_ref", mats.N.select([mats.ref]).terms(ns), lo=0.0, hi=0.0, labels=[labels[mats.ref]])

    # cost epigraph alpha_k >= c2 P^2 + c1 P + c0
    sigma = _cost_units(case) if scale_costs else np.ones(ng)
    c2 = np.array([g.c2 for g in case.gens]) / sigma
    c1 = np.array([g.c1 for g in case.gens]) / sigma
    c0 = np.array([g.c0 for g in case.gens]) / sigma
    quad = np.flatnonzero(c2 > 0)
    lin = np.flatnonzero(c2 == 0)
    if quad.size:
        q = quad.size
        rows, cols, vals = [], [], []
        const = np.zeros(3 * q)
        for r, gi in enumerate(quad):
            p, a = pg_index[gen_bus[gi]], alpha_index[gi]
            # (1 - c1 P - c0 + alpha,  1 + c1 P + c0 - alpha,  2 sqrt(c2) P)
            rows += [3 * r, 3 * r, 3 * r + 1, 3 * r + 1, 3 * r + 2]
            cols += [p, a, p, a, p]
            vals += [-c1[gi], 1.0, c1[gi], -1.0, 2.0 * math.sqrt(c2[gi])]
            const[3 * r] = 1.0 - c0[gi]
            const[3 * r + 1] = 1.0 + c0[gi]
        prob.add_soc("cost", Terms.build(3 * q, ns, rows, cols, vals), const=const, size=3,
                     labels=[str(case.gens[gi].bus) for gi in quad])
    if lin.size:
        # alpha - c1 P - c0 >= 0
        q = lin.size
        rows = np.r_[np.arange(q), np.arange(q)]
        cols = np.r_[alpha_index[lin], pg_index[gen_bus[lin]]]
        vals = np.r_[np.ones(q), -c1[lin]]
        prob.add_linear("cost_linear", Terms.build(q, ns, rows, cols, vals), const=-c0[lin], lo=0.0,
                        labels=[str(case.gens[gi].bus) for gi in lin])

    smax = net.branches.s_max
    limited = np.flatnonzero(smax > 0)
    if limited.size:
        # (S_max, tr(Z W), tr(Zbar W)) per end; cone order: lm then ml for each limited branch
        blocks = []
        for fam_p, fam_q in ((mats.Zlm, mats.Zbar_lm), (mats.Zml, mats.Zbar_ml)):
            blocks.append((fam_p.select(limited), fam_q.select(limited)))
        nc = 2 * limited.size
        mrow, mi, mj, mval = [], [], [], []
        for end, (fp, fq) in enumerate(blocks):
            for comp, fam in ((1, fp), (2, fq)):
                t = fam.terms(ns)
                cone = 2 * t.mrow + end
                mrow.append(3 * cone + comp)
                mi.append(t.mi)
                mj.append(t.mj)
                mval.append(t.mval)
        const = np.zeros(3 * nc)
        const[0::3] = np.repeat(smax[limited], 2)
        terms = Terms.build(3 * nc, ns, mrow=np.concatenate(mrow), mi=np.concatenate(mi),
                            mj=np.concatenate(mj), mval=np.concatenate(mval))
        br_labels = []
        for e in limited:
            br = case.branches[e]
            br_labels += [f"{br.from_bus}->{br.to_bus}", f"{br.to_bus}->{br.from_bus}"]
        prob.add_soc("flow", terms, const=const, size=3, labels=br_labels)

    relax = RelaxationProblem(case, net, mats, prob, pg_index, alpha_index, gen_bus, limited, sigma)
    set_objective(relax, CostObjective())
    return relax


def set_objective(prob: RelaxationProblem, objective: Objective) -> RelaxationProblem:
    cp = prob.conic
    ns = cp.n_scalars
    a = prob.alpha_index
    if isinstance(objective, CostObjective):
        terms = Terms.build(1, ns, np.zeros(a.size), a, prob.alpha_scale)
    elif isinstance(objective, LaplacianObjective):
        Lb = prob.mats.reduce_matrix(laplacian_matrix(prob.case, prob.net, objective.weights))
        terms = trace_terms([Lb], ns)
    elif isinstance(objective, ReactivePenalty):
        Q = prob.mats.reduce_matrix(qpen_matrix(prob.net)) * objective.eps_b
        t = trace_terms([Q], ns)
        S = sp.csr_matrix((prob.alpha_scale, (np.zeros(a.size, int), a)), shape=(1, ns))
        terms = Terms(S, t.mrow, t.mi, t.mj, t.mval)
    else:
        raise TypeError(f"unknown objective {objective!r}")
    cp.set_objective(terms)
    prob.objective = objective
    return prob


def add_cost_cap(prob: RelaxationProblem, c_star: float, delta: float) -> RelaxationProblem:
    """Install ``sum(alpha) <= c_star (1 + delta)``, replacing any earlier cap."""
    if not math.isfinite(c_star):
        raise ValueError("c_star must be finite")
    if not (delta >= 0):
        raise ValueError("delta must be nonnegative")
    cp = prob.conic
    cp.remove_linear("cost_cap")
    a = prob.alpha_index
    cp.add_linear("cost_cap", Terms.build(1, cp.n_scalars, np.zeros(a.size), a, prob.alpha_scale),
                  hi=c_star * (1.0 + delta), labels=["total"])
    prob.cost_cap = (float(c_star), float(delta))
    return prob


def lift_point(prob: RelaxationProblem, v: VoltageVector) -> tuple[np.ndarray, np.ndarray]:
    """Scalars and PSD block of the lifted point ``W = x x^T`` for voltage ``v``.

    ``alpha`` is set to the generation cost at each generator. For the
    reduced problem ``v`` must already satisfy ``vq[ref] = 0``.
    """
    x_full = v.stacked
    x = prob.mats.reduce_vector(x_full)
    W = np.outer(x, x)
    from .network import eval_injections

    pg, _ = eval_injections(prob.net, v, prob.case)
    s = np.zeros(prob.conic.n_scalars)
    gb = prob.gen_bus
    s[prob.pg_index[gb]] = pg[gb]
    for gi, gen in enumerate(prob.case.gens):
        p = pg[gb[gi]]
        s[prob.alpha_index[gi]] = (gen.c2 * p * p + gen.c1 * p + gen.c0) / prob.alpha_scale[gi]
    return s, W


# ---------------------------------------------------------------------------
# solutions


@dataclass
class LiftedSolution:
    W: np.ndarray
    alpha: np.ndarray  # per generator
    p_gen: np.ndarray  # per bus (zero where no generator)
    objective: float
    status: str
    n: int
    ref: int
    reduced: bool
    eigenvalues: np.ndarray = field(init=False, repr=False)
    eigenvectors: np.ndarray = field(init=False, repr=False)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        Ws = 0.5 * (self.W + self.W.T)
        self.W = Ws
        lam, vec = np.linalg.eigh(Ws)
        self.eigenvalues = lam[::-1].copy()
        self.eigenvectors = vec[:, ::-1].copy()

    @property
    def cost(self) -> float:
        return float(np.sum(self.alpha))

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    @classmethod
    def from_conic(cls, prob: RelaxationProblem, sol) -> "LiftedSolution":
        x = np.asarray(sol.x, dtype=float)
        p_gen = np.zeros(prob.mats.n)
        gb = prob.gen_bus
        p_gen[gb] = x[prob.pg_index[gb]]
        return cls(W=np.asarray(sol.W, dtype=float), alpha=x[prob.alpha_index] * prob.alpha_scale, p_gen=p_gen,
                   objective=float(sol.objective), status=str(getattr(sol.status, "value", sol.status)),
                   n=prob.mats.n, ref=prob.mats.ref, reduced=prob.eliminated)


def _leading_pair(lam: np.ndarray, vec: np.ndarray, ref_row: int | None):
    l1 = lam[0]
    eta = vec[:, 0]
    if ref_row is not None:
        ties = np.flatnonzero(lam >= l1 - 1e-12 * max(abs(l1), 1.0))
        if ties.size > 1:
            best = ties[np.argmax(np.abs(vec[ref_row, ties]))]
            eta = vec[:, best]
    return l1, eta


def recover_voltages(sol: LiftedSolution) -> VoltageVector:
    """Voltage phasor from the dominant eigenpair, reference ``vq`` reinserted,
    sign fixed so the reference bus has nonnegative real part."""
    lam, vec = sol.eigenvalues, sol.eigenvectors
    l1, eta = _leading_pair(lam, vec, sol.ref)
    if not l1 > 0:
        raise DegenerateSolution(f"largest eigenvalue {l1:.3e} is not positive")
    x = math.sqrt(l1) * eta
    if sol.reduced:
        x = np.insert(x, sol.n + sol.ref, 0.0)
    if x[sol.ref] < 0:
        x = -x
    return VoltageVector.from_stacked(x)


def rank_metrics(sol_or_W) -> dict:
    lam = sol_or_W.eigenvalues if isinstance(sol_or_W, LiftedSolution) else \
        np.linalg.eigvalsh(0.5 * (np.asarray(sol_or_W) + np.asarray(sol_or_W).T))[::-1]
    l1 = float(lam[0])
    l2 = float(lam[1]) if lam.size > 1 else 0.0
    ratio = 0.0 if l1 <= 0 else min(1.0, max(0.0, l2 / l1))
    return {"lambda1": l1, "lambda2": l2, "ratio": ratio, "rank_one": ratio <= RANK_ONE_RATIO}
