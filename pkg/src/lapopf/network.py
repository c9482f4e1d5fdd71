"""Nonconvex AC network physics evaluated at a given voltage profile.

This module is the ground truth that every lifted (trace) quantity built in
:mod:`lapopf.sdp` is checked against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .case_io import CaseData

__all__ = [
    "BranchParams",
    "NetworkMatrices",
    "VoltageVector",
    "LineFlows",
    "OperatingPoint",
    "Tolerances",
    "FeasibilityReport",
    "build_admittance",
    "eval_injections",
    "eval_line_flows",
    "eval_cost",
    "operating_point",
    "check_feasibility",
]


@dataclass(frozen=True)
class BranchParams:
    """Per-branch series admittance and transformer data, indexed by position."""

    f: np.ndarray  # from-bus index
    t: np.ndarray  # to-bus index
    g: np.ndarray
    b: np.ndarray
    b_sh: np.ndarray
    tau: np.ndarray
    theta: np.ndarray
    s_max: np.ndarray
    # two-port admittances: I_f = yff V_f + yft V_t ; I_t = ytf V_f + ytt V_t
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray


@dataclass(frozen=True)
class NetworkMatrices:
    Y: sp.csr_matrix  # n x n complex bus admittance
    branches: BranchParams

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def G(self) -> sp.csr_matrix:
        return self.Y.real

    @property
    def B(self) -> sp.csr_matrix:
        return self.Y.imag


@dataclass(frozen=True)
class VoltageVector:
    vd: np.ndarray
    vq: np.ndarray

    def __post_init__(self):
        vd = np.asarray(self.vd, dtype=float)
        vq = np.asarray(self.vq, dtype=float)
        if vd.shape != vq.shape or vd.ndim != 1:
            raise ValueError("vd and vq must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(vd)) and np.all(np.isfinite(vq))):
            raise ValueError("voltage components must be finite")
        object.__setattr__(self, "vd", vd)
        object.__setattr__(self, "vq", vq)

    @classmethod
    def from_complex(cls, v) -> "VoltageVector":
        v = np.asarray(v, dtype=complex)
        return cls(v.real.copy(), v.imag.copy())

    @classmethod
    def from_stacked(cls, x) -> "VoltageVector":
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n].copy(), x[n:].copy())

    @property
    def complex(self) -> np.ndarray:
        return self.vd + 1j * self.vq

    @property
    def stacked(self) -> np.ndarray:
        """The real vector ``[vd; vq]`` whose outer product is the lifted matrix."""
        return np.concatenate([self.vd, self.vq])

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vd, self.vq)


@dataclass(frozen=True)
class LineFlows:
    p_from: np.ndarray  # P_lm
    q_from: np.ndarray  # Q_lm
    p_to: np.ndarray  # P_ml
    q_to: np.ndarray  # Q_ml

    @property
    def s_from(self) -> np.ndarray:
        return np.hypot(self.p_from, self.q_from)

    @property
    def s_to(self) -> np.ndarray:
        return np.hypot(self.p_to, self.q_to)


def build_admittance(case: CaseData) -> NetworkMatrices:
    """Assemble Y = G + jB from the Pi-model branches and bus shunts.

    The ideal transformer ``tau * exp(j*theta) : 1`` sits at the from end.
    """
    n = case.n_bus
    idx = case.bus_index
    br = case.branches
    f = np.array([idx[b.from_bus] for b in br], dtype=int)
    t = np.array([idx[b.to_bus] for b in br], dtype=int)
    r = np.array([b.r for b in br], dtype=float)
    x = np.array([b.x for b in br], dtype=float)
    b_sh = np.array([b.b_sh for b in br], dtype=float)
    tau = np.array([b.tau for b in br], dtype=float)
    theta = np.array([b.theta_shift for b in br], dtype=float)
    s_max = np.array([b.s_max for b in br], dtype=float)

    ys = 1.0 / (r + 1j * x)
    ratio = tau * np.exp(1j * theta)
    ytt = ys + 0.5j * b_sh
    yff = ytt / tau**2
    yft = -ys / np.conj(ratio)
    ytf = -ys / ratio

    y_shunt = np.array([complex(bus.g_shunt, bus.b_shunt) for bus in case.buses])
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, y_shunt])
    Y = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    Y.sum_duplicates()

    params = BranchParams(f=f, t=t, g=ys.real, b=ys.imag, b_sh=b_sh, tau=tau, theta=theta,
                          s_max=s_max, yff=yff, yft=yft, ytf=ytf, ytt=ytt)
    return NetworkMatrices(Y=Y, branches=params)


def _loads(case: CaseData) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([b.p_load for b in case.buses]), np.array([b.q_load for b in case.buses]))


def eval_injections(net: NetworkMatrices, v: VoltageVector, case: CaseData) -> tuple[np.ndarray, np.ndarray]:
    """Generation ``(P_G, Q_G)`` needed at every bus to sustain ``v`` (pu)."""
    V = v.complex
    if V.size != net.n:
        raise ValueError(f"voltage vector has {V.size} entries, network has {net.n} buses")
    s = V * np.conj(net.Y @ V)
    pd, qd = _loads(case)
    return s.real + pd, s.imag + qd


def eval_line_flows(net: NetworkMatrices, v: VoltageVector) -> LineFlows:
    V = v.complex
    if V.size != net.n:
        raise ValueError(f"voltage vector has {V.size} entries, network has {net.n} buses")
    p = net.branches
    vf, vt = V[p.f], V[p.t]
    s_from = vf * np.conj(p.yff * vf + p.yft * vt)
    s_to = vt * np.conj(p.ytf * vf + p.ytt * vt)
    return LineFlows(s_from.real, s_from.imag, s_to.real, s_to.imag)


def _gen_per_bus(case: CaseData, strict: bool = True) -> list:
    per_bus = [None] * case.n_bus
    idx = case.bus_index
    for g in case.gens:
        k = idx[g.bus]
        if per_bus[k] is not None and strict:
            raise ValueError(f"bus {g.bus} has more than one generator")
        per_bus[k] = g
    return per_bus


def eval_cost(case: CaseData, p_gen) -> float:
    """Generation cost in $/h.

    ``p_gen`` is either one value per bus (length ``n_bus``; requires at most
    one generator per bus) or one value per generator (length ``len(gens)``).
    Cost coefficients are stored per-unit, so no MW conversion happens here.
    """
    p_gen = np.asarray(p_gen, dtype=float)
    if p_gen.size == len(case.gens) and p_gen.size != case.n_bus:
        pairs = zip(case.gens, p_gen)
    elif p_gen.size == case.n_bus:
        per_bus = _gen_per_bus(case)
        pairs = ((g, p_gen[k]) for k, g in enumerate(per_bus) if g is not None)
    else:
        raise ValueError("p_gen must have one entry per bus or per generator")
    return float(sum(g.c2 * p * p + g.c1 * p + g.c0 for g, p in pairs))


def bus_limits(case: CaseData) -> dict[str, np.ndarray]:
    """Aggregate generation box per bus (zero where there is no generator)."""
    out = {k: np.zeros(case.n_bus) for k in ("pmin", "pmax", "qmin", "qmax")}
    idx = case.bus_index
    for g in case.gens:
        k = idx[g.bus]
        for name in out:
            out[name][k] += getattr(g, name)
    return out


@dataclass(frozen=True)
class OperatingPoint:
    voltages: VoltageVector
    p_gen: np.ndarray
    q_gen: np.ndarray
    flows: LineFlows
    cost: float

    def as_dict(self, base_mva: float) -> dict:
        return {
            "vd": self.voltages.vd.tolist(),
            "vq": self.voltages.vq.tolist(),
            "vm": self.voltages.magnitude.tolist(),
            "va_deg": np.degrees(np.angle(self.voltages.complex)).tolist(),
            "p_gen_pu": self.p_gen.tolist(),
            "q_gen_pu": self.q_gen.tolist(),
            "p_gen_mw": (self.p_gen * base_mva).tolist(),
            "q_gen_mvar": (self.q_gen * base_mva).tolist(),
            "cost": self.cost,
        }


def operating_point(case: CaseData, net: NetworkMatrices, v: VoltageVector) -> OperatingPoint:
    pg, qg = eval_injections(net, v, case)
    return OperatingPoint(voltages=v, p_gen=pg, q_gen=qg, flows=eval_line_flows(net, v),
                          cost=eval_cost(case, pg))


@dataclass(frozen=True)
class Tolerances:
    eps_V: float = 5e-4  # pu
    eps_flow: float = 1.0  # MVA
    eps_inj: float = 1.0  # MVA

    def __post_init__(self):
        if min(self.eps_V, self.eps_flow, self.eps_inj) < 0:
            raise ValueError("tolerances must be nonnegative")


@dataclass(frozen=True)
class FeasibilityReport:
    max_voltage_violation: float  # pu
    max_gen_violation: float  # MVA
    max_flow_violation: float  # MVA
    voltage_violation: np.ndarray = field(repr=False)
    gen_violation: np.ndarray = field(repr=False)
    flow_violation: np.ndarray = field(repr=False)  # per branch, worse of the two ends
    tolerances: Tolerances = Tolerances()

    @property
    def passed(self) -> bool:
        tol = self.tolerances
        return (self.max_voltage_violation <= tol.eps_V and self.max_gen_violation <= tol.eps_inj
                and self.max_flow_violation <= tol.eps_flow)

    def as_dict(self) -> dict:
        return {
            "max_voltage_violation_pu": self.max_voltage_violation,
            "max_gen_violation_MVA": self.max_gen_violation,
            "max_flow_violation_MVA": self.max_flow_violation,
            "passed": self.passed,
        }


def check_feasibility(case: CaseData, net: NetworkMatrices, v: VoltageVector,
                      tol: Tolerances = Tolerances()) -> FeasibilityReport:
    """Residuals of every OPF constraint at ``v``.

    Generation-box residuals are the apparent mismatch ``|(dP, dQ)|`` outside
    the per-bus box (non-generator buses have a zero box); flow residuals are
    ``max(0, |S| - S_max)`` on limited branches. Both are scaled to MVA.
    """
    vm = v.magnitude
    vmin = np.array([b.vmin for b in case.buses])
    vmax = np.array([b.vmax for b in case.buses])
    v_viol = np.maximum(0.0, np.maximum(vmin - vm, vm - vmax))

    pg, qg = eval_injections(net, v, case)
    lim = bus_limits(case)
    dp = np.maximum(0.0, np.maximum(lim["pmin"] - pg, pg - lim["pmax"]))
    dq = np.maximum(0.0, np.maximum(lim["qmin"] - qg, qg - lim["qmax"]))
    gen_viol = np.hypot(dp, dq) * case.base_mva

    flows = eval_line_flows(net, v)
    smax = net.branches.s_max
    limited = smax > 0
    worst = np.maximum(flows.s_from, flows.s_to)
    flow_viol = np.where(limited, np.maximum(0.0, worst - smax), 0.0) * case.base_mva

    def _max(a):
        return float(a.max()) if a.size else 0.0

    return FeasibilityReport(
        max_voltage_violation=_max(v_viol),
        max_gen_violation=_max(gen_viol),
        max_flow_violation=_max(flow_viol),
        voltage_violation=v_viol,
        gen_violation=gen_viol,
        flow_violation=flow_viol,
        tolerances=tol,
    )
