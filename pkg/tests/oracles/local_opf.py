"""Regenerate ``tests/fixtures/local_costs.json`` with an independent local AC OPF.

Uses PYPOWER's primal-dual interior point solver on the raw MATPOWER files,
read by the small standalone parser below (not by ``lapopf``). Not part of
the test run; requires ``pip install pypower``.

    python3 tests/oracles/local_opf.py tests/fixtures/case14.m ... > tests/fixtures/local_costs.json
"""
import json
import os
import re
import sys

import numpy as np
import pypower.pips as _pips
from pypower.api import ppoption, runopf

_r = np.r_


class _R:
    # pypower predates numpy 2: empty constraint blocks arrive as (0, 1)
    def __getitem__(self, objs):
        t = objs if isinstance(objs, tuple) else (objs,)
        if len({np.ndim(o) for o in t}) > 1:
            t = tuple(np.ravel(o) if isinstance(o, np.ndarray) and o.ndim == 2 and min(o.shape) <= 1 else o
                      for o in t)
        return _r[t]


_pips.r_ = _R()


def read_m(path):
    text = re.sub(r"%.*", "", open(path).read())
    ppc = {"version": "2"}
    ppc["baseMVA"] = float(re.search(r"mpc\.baseMVA\s*=\s*([\d.eE+-]+)", text).group(1))
    for name in ("bus", "gen", "branch", "gencost"):
        body = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S).group(1)
        rows = [r for r in re.split(r"[;\n]", body) if r.strip()]
        ppc[name] = np.array([[float(x) for x in r.split()] for r in rows])
    return ppc


def main(paths):
    out = {}
    for path in paths:
        ppc = read_m(path)
        # unrated branches get a bound that can never bind (pypower fails on empty blocks)
        ppc["branch"][ppc["branch"][:, 5] == 0, 5] = 1e5
        r = runopf(ppc, ppoption(VERBOSE=0, OUT_ALL=0))
        name = os.path.splitext(os.path.basename(path))[0]
        out[name] = {"cost": float(r["f"]), "success": bool(r["success"]), "solver": "pypower-pips"}
    json.dump(out, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main(sys.argv[1:])
