"""Solver-neutral conic program with one symmetric matrix block.

Variables are a vector ``x`` of named free scalars and a symmetric matrix
``W`` of dimension ``dim`` constrained to the PSD cone. Matrix terms address
lower-triangle entries ``(i, j)`` with ``i >= j`` and their coefficients act on
the *scaled* vector form, where off-diagonal entries carry a factor sqrt(2).
With that convention the coefficient row of a symmetric matrix ``A`` is
``svec(A)`` and its inner product with ``svec(W)`` equals ``tr(A W)``.

Constraints come in blocks so problems with thousands of rows stay cheap to
copy and extend:

* :class:`LinearBlock` -- ``lo <= a.x + <A, W> + const <= hi`` per row;
* :class:`SocBlock` -- ``count`` second-order cones of dimension ``size``,
  each ``(u0, u1, ...)`` with ``u0 >= ||(u1, ...)||``.
"""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Terms",
    "LinearBlock",
    "SocBlock",
    "ConicProblem",
    "SolveStatus",
    "ConicSolution",
    "SolverSettings",
    "svec",
    "smat",
    "svec_index",
    "trace_terms",
    "validate",
    "dump_triplets",
]

SQRT2 = math.sqrt(2.0)


def svec_index(i, j, dim: int):
    """Position of lower-triangle entry ``(i, j)``, ``i >= j``, column-major."""
    i = np.asarray(i)
    j = np.asarray(j)
    return j * dim - (j * (j - 1)) // 2 + (i - j)


def svec(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    i, j = np.tril_indices(d)
    order = np.argsort(svec_index(i, j, d), kind="stable")
    i, j = i[order], j[order]
    return np.where(i == j, M[i, j], SQRT2 * M[i, j])


def smat(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if dim is None:
        dim = int(round((math.sqrt(8 * v.size + 1) - 1) / 2))
    if dim * (dim + 1) // 2 != v.size:
        raise ValueError("vector length is not triangular")
    i, j = np.tril_indices(dim)
    pos = svec_index(i, j, dim)
    vals = np.where(i == j, v[pos], v[pos] / SQRT2)
    M = np.zeros((dim, dim))
    M[i, j] = vals
    M[j, i] = vals
    return M


@dataclass(frozen=True)
class Terms:
    """Coefficient rows in COO form.

    ``scalar`` is a sparse matrix (rows x n_scalars). Matrix entries are the
    parallel arrays ``(mrow, mi, mj, mval)``.
    """

    scalar: sp.csr_matrix
    mrow: np.ndarray
    mi: np.ndarray
    mj: np.ndarray
    mval: np.ndarray

    @property
    def rows(self) -> int:
        return self.scalar.shape[0]

    @classmethod
    def build(cls, rows: int, n_scalars: int, srow=(), scol=(), sval=(), mrow=(), mi=(), mj=(), mval=()):
        S = sp.csr_matrix((np.asarray(sval, float), (np.asarray(srow, int), np.asarray(scol, int))),
                          shape=(rows, n_scalars))
        return cls(S, np.asarray(mrow, int), np.asarray(mi, int), np.asarray(mj, int), np.asarray(mval, float))

    def with_scalars(self, n_scalars: int) -> "Terms":
        if self.scalar.shape[1] == n_scalars:
            return self
        S = self.scalar.tocoo()
        S = sp.csr_matrix((S.data, (S.row, S.col)), shape=(self.rows, n_scalars))
        return Terms(S, self.mrow, self.mi, self.mj, self.mval)


def trace_terms(mats: Iterable[sp.spmatrix], n_scalars: int = 0) -> Terms:
    """Rows ``tr(A_r W)`` for a sequence of symmetric matrices."""
    mrow, mi, mj, mval = [], [], [], []
    count = 0
    for r, A in enumerate(mats):
        count += 1
        L = sp.tril(sp.coo_matrix(A))
        L.sum_duplicates()
        keep = L.data != 0
        i, j, v = L.row[keep], L.col[keep], L.data[keep]
        mrow.append(np.full(i.size, r))
        mi.append(i)
        mj.append(j)
        mval.append(np.where(i == j, v, SQRT2 * v))
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
    return Terms.build(count, n_scalars, mrow=cat(mrow), mi=cat(mi), mj=cat(mj), mval=cat(mval))


@dataclass(frozen=True)
class LinearBlock:
    name: str
    terms: Terms
    const: np.ndarray
    lo: np.ndarray  # -inf allowed
    hi: np.ndarray  # +inf allowed
    labels: tuple = ()


@dataclass(frozen=True)
class SocBlock:
    name: str
    terms: Terms  # count * size rows, cone-major
    const: np.ndarray
    size: int
    labels: tuple = ()

    @property
    def count(self) -> int:
        return self.terms.rows // self.size if self.size else 0


class ConicProblem:
    """``min c.x + <C, W> + c0`` subject to linear, SOC and ``W >= 0`` constraints.

    Build with :meth:`add_scalar`, :meth:`add_linear`, :meth:`add_soc`,
    :meth:`set_objective`; :meth:`seal` freezes the instance. :meth:`copy`
    gives an unsealed copy that shares the (immutable) blocks.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("matrix block dimension must be positive")
        self.dim = dim
        self.scalar_names: list[str] = []
        self.linear: list[LinearBlock] = []
        self.soc: list[SocBlock] = []
        self.objective: Terms | None = None
        self.objective_const: float = 0.0
        self._sealed = False

    # -- building
    def _check_open(self):
        if self._sealed:
            raise RuntimeError("problem is sealed")

    @property
    def n_scalars(self) -> int:
        return len(self.scalar_names)

    @property
    def svec_len(self) -> int:
        return self.dim * (self.dim + 1) // 2

    def add_scalar(self, name: str) -> int:
        self._check_open()
        self.scalar_names.append(name)
        return len(self.scalar_names) - 1

    def add_scalars(self, names: Iterable[str]) -> np.ndarray:
        start = self.n_scalars
        for nm in names:
            self.add_scalar(nm)
        return np.arange(start, self.n_scalars)

    def add_linear(self, name: str, terms: Terms, const=0.0, lo=-np.inf, hi=np.inf, labels=()) -> LinearBlock:
        self._check_open()
        m = terms.rows
        blk = LinearBlock(name, terms, _full(const, m), _full(lo, m), _full(hi, m), tuple(labels))
        if np.any(blk.lo > blk.hi):
            raise ValueError(f"block {name}: lower bound above upper bound")
        self.linear.append(blk)
        return blk

    def add_soc(self, name: str, terms: Terms, const=0.0, size: int = 3, labels=()) -> SocBlock:
        self._check_open()
        if size and terms.rows % size:
            raise ValueError(f"block {name}: {terms.rows} rows is not a multiple of cone size {size}")
        blk = SocBlock(name, terms, _full(const, terms.rows), size, tuple(labels))
        self.soc.append(blk)
        return blk

    def set_objective(self, terms: Terms, const: float = 0.0):
        self._check_open()
        if terms.rows != 1:
            raise ValueError("objective must be a single row")
        self.objective = terms
        self.objective_const = float(const)

    def remove_linear(self, name: str):
        self._check_open()
        self.linear = [b for b in self.linear if b.name != name]

    def seal(self) -> "ConicProblem":
        self._sealed = True
        return self

    @property
    def sealed(self) -> bool:
        return self._sealed

    def copy(self) -> "ConicProblem":
        other = ConicProblem(self.dim)
        other.scalar_names = list(self.scalar_names)
        other.linear = list(self.linear)
        other.soc = list(self.soc)
        other.objective = self.objective
        other.objective_const = self.objective_const
        return other

    def block(self, name: str):
        for b in self.linear + self.soc:
            if b.name == name:
                return b
        raise KeyError(name)

    # -- compiled views
    def compiled_rows(self, terms: Terms) -> sp.csr_matrix:
        """Coefficient matrix over ``[x ; svec(W)]``."""
        ns, nw = self.n_scalars, self.svec_len
        S = terms.with_scalars(ns).scalar.tocoo()
        cols = svec_index(terms.mi, terms.mj, self.dim) + ns
        rows = np.concatenate([S.row, terms.mrow])
        allc = np.concatenate([S.col, cols])
        vals = np.concatenate([S.data, terms.mval])
        M = sp.csr_matrix((vals, (rows, allc)), shape=(terms.rows, ns + nw))
        M.sum_duplicates()
        return M

    def evaluate(self, x: np.ndarray, W: np.ndarray, magnitudes: bool = False) -> dict:
        """Values of every block at a candidate point (used by the residual check).

        With ``magnitudes`` each entry is a pair ``(value, sum of |term|)`` where
        the second item adds up the absolute values of the individual terms.
        """
        z = np.concatenate([np.asarray(x, float), svec(W)])
        out = {}
        for b in self.linear + self.soc:
            R = self.compiled_rows(b.terms)
            val = R @ z + b.const
            if magnitudes:
                mag = abs(R) @ np.abs(z) + np.abs(b.const)
                val = (val, mag)
            if isinstance(b, SocBlock):
                val = tuple(v.reshape(-1, b.size) for v in val) if magnitudes else val.reshape(-1, b.size)
            out[b.name] = val
        if self.objective is not None:
            out["objective"] = float((self.compiled_rows(self.objective) @ z)[0] + self.objective_const)
        return out


def _full(v, m: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return np.full(m, float(a))
    if a.shape != (m,):
        raise ValueError(f"expected {m} values, got shape {a.shape}")
    return a.copy()


# --------------------------------------------------------------------------
# results


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_TROUBLE = "numerical_trouble"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    verbose: bool = False
    # backend conditioning knobs: the normalized objective is multiplied by
    # objective_scale, then by each scale_ladder entry in turn while the solve
    # keeps failing; refinement is the number of KKT refinement steps
    objective_scale: float = 0.1
    scale_ladder: tuple = (1.0, 10.0, 0.01)
    refinement: int = 2

    def relaxed(self, factor: float = 10.0) -> "SolverSettings":
        return replace(self, feas_tol=self.feas_tol * factor, gap_tol=self.gap_tol * factor)


@dataclass
class ConicSolution:
    status: SolveStatus
    x: np.ndarray
    W: np.ndarray
    objective: float
    primal_residual: float = math.nan
    relative_gap: float = math.nan
    iterations: int = 0
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


# --------------------------------------------------------------------------
# diagnostics


def validate(prob: ConicProblem) -> list[str]:
    """Structural diagnostics; an empty list means the problem is well formed."""
    out = []
    d, ns = prob.dim, prob.n_scalars
    used = np.zeros(ns, dtype=bool)
    blocks = [(b.name, b.terms) for b in prob.linear] + [(b.name, b.terms) for b in prob.soc]
    if prob.objective is not None:
        blocks.append(("objective", prob.objective))
    else:
        out.append("no objective set")
    for name, t in blocks:
        if t.scalar.shape[1] > ns:
            out.append(f"{name}: references undeclared scalar variables")
        S = t.scalar.tocoo()
        used[S.col[S.col < ns]] = True
        if t.mi.size:
            if np.any(t.mi < t.mj):
                k = int(np.argmax(t.mi < t.mj))
                out.append(f"{name}: coefficient on upper-triangle entry ({t.mi[k]}, {t.mj[k]})")
            if t.mi.max() >= d or t.mj.min() < 0:
                out.append(f"{name}: matrix index outside the {d}x{d} block")
            if np.any(t.mrow >= t.rows):
                out.append(f"{name}: matrix term on nonexistent row")
    for b in prob.soc:
        if b.size < 2:
            out.append(f"{b.name}: second-order cone of dimension {b.size} (< 2)")
        if b.terms.rows == 0:
            out.append(f"{b.name}: empty cone block")
    for b in prob.linear:
        if b.terms.rows == 0:
            out.append(f"{b.name}: empty linear block")
    for k in np.flatnonzero(~used):
        out.append(f"scalar {prob.scalar_names[k]!r} is not referenced by any constraint")
    return out


def dump_triplets(prob: ConicProblem, fh: TextIO | None = None) -> str | None:
    """Write the problem as sparse triplets.

    Format (whitespace separated, ``#`` starts a comment)::

        # lapopf-triplets/1 dim=<d> scalars=<ns>
        S <index> <name>                        scalar declarations
        B <cid> L <lo> <hi> <block>:<row>       linear constraint header
        B <cid> Q <size> <block>:<cone>:<comp>  SOC component header
        <cid> <row> <col> <value>

    Constraint id 0 is the objective. In coefficient lines a nonnegative
    ``row``/``col`` pair is a lower-triangle matrix entry (scaled-vector
    coefficient); ``row = -1`` marks scalar ``col``; ``row = col = -1`` is the
    constant term.
    """
    own = fh is None
    buf = io.StringIO() if own else fh
    w = buf.write
    w(f"# lapopf-triplets/1 dim={prob.dim} scalars={prob.n_scalars}\n")
    for k, nm in enumerate(prob.scalar_names):
        w(f"S {k} {nm}\n")

    def emit(cid0: int, t: Terms, const: np.ndarray):
        S = t.scalar.tocoo()
        for r, c, v in zip(S.row, S.col, S.data):
            w(f"{cid0 + r} -1 {c} {float(v)!r}\n")
        for r, i, j, v in zip(t.mrow, t.mi, t.mj, t.mval):
            w(f"{cid0 + r} {i} {j} {float(v)!r}\n")
        for r, v in enumerate(const):
            if v != 0:
                w(f"{cid0 + r} -1 -1 {float(v)!r}\n")

    if prob.objective is not None:
        w("B 0 O objective\n")
        emit(0, prob.objective, np.array([prob.objective_const]))
    cid = 1
    for b in prob.linear:
        for r in range(b.terms.rows):
            w(f"B {cid + r} L {float(b.lo[r])!r} {float(b.hi[r])!r} {b.name}:{r}\n")
        emit(cid, b.terms, b.const)
        cid += b.terms.rows
    for b in prob.soc:
        for r in range(b.terms.rows):
            w(f"B {cid + r} Q {b.size} {b.name}:{r // b.size}:{r % b.size}\n")
        emit(cid, b.terms, b.const)
        cid += b.terms.rows
    if own:
        return buf.getvalue()
    return None
