"""Independent residual check of a candidate point against a conic problem.

Nothing here consults the solver: every block is re-evaluated from the IR.
Violations are relative to the size of what is being compared: a linear row
is divided by ``1 + |bound| + sum_j |a_j z_j|`` (the magnitudes of the terms
it adds up), a cone by ``1 + sum of its component magnitudes`` and the PSD
violation by ``1 + lambda_max``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ir import ConicProblem

__all__ = ["CheckReport", "check_solution"]


@dataclass
class CheckReport:
    linear: dict = field(default_factory=dict)  # block -> max scaled violation
    soc: dict = field(default_factory=dict)
    psd: float = 0.0
    lambda_min: float = 0.0
    lambda_max: float = 0.0
    worst: tuple = ("", -1)  # (block, row)

    @property
    def max_residual(self) -> float:
        vals = list(self.linear.values()) + list(self.soc.values()) + [self.psd]
        return float(max(vals)) if vals else 0.0

    def as_dict(self) -> dict:
        return {"max_residual": self.max_residual, "psd": self.psd, "lambda_min": self.lambda_min,
                "worst_block": self.worst[0], "worst_row": int(self.worst[1]),
                **{f"linear:{k}": v for k, v in self.linear.items()},
                **{f"soc:{k}": v for k, v in self.soc.items()}}


def check_solution(prob: ConicProblem, x, W) -> CheckReport:
    x = np.asarray(x, dtype=float)
    W = np.asarray(W, dtype=float)
    rep = CheckReport()
    if x.shape != (prob.n_scalars,) or W.shape != (prob.dim, prob.dim):
        raise ValueError("candidate point does not match the problem dimensions")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(W))):
        rep.psd = np.inf
        return rep
    vals = prob.evaluate(x, W, magnitudes=True)
    worst = 0.0
    for b in prob.linear:
        v, mag = vals[b.name]
        with np.errstate(invalid="ignore"):
            lo = np.where(np.isfinite(b.lo), (b.lo - v) / (1 + np.abs(b.lo) + mag), 0.0)
            hi = np.where(np.isfinite(b.hi), (v - b.hi) / (1 + np.abs(b.hi) + mag), 0.0)
        viol = np.maximum(0.0, np.maximum(lo, hi))
        rep.linear[b.name] = float(viol.max()) if viol.size else 0.0
        if viol.size and viol.max() > worst:
            worst = float(viol.max())
            rep.worst = (b.name, int(viol.argmax()))
    for b in prob.soc:
        u, mag = vals[b.name]
        viol = np.maximum(0.0, np.linalg.norm(u[:, 1:], axis=1) - u[:, 0]) / (1 + mag.sum(axis=1))
        rep.soc[b.name] = float(viol.max()) if viol.size else 0.0
        if viol.size and viol.max() > worst:
            worst = float(viol.max())
            rep.worst = (b.name, int(viol.argmax()))
    lam = np.linalg.eigvalsh(0.5 * (W + W.T))
    rep.lambda_min, rep.lambda_max = float(lam[0]), float(lam[-1])
    rep.psd = max(0.0, -lam[0]) / (1 + max(lam[-1], 0.0))
    if rep.psd > worst:
        rep.worst = ("psd", -1)
    return rep
