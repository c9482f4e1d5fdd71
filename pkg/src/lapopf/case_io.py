"""Power-system case data: parsing, per-unit normalization and preprocessing.

Two input formats are understood:

* the package's own JSON schema (canonical, already per-unit), and
* a pragmatic subset of MATPOWER ``.m`` case files (``mpc.baseMVA``,
  ``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and ``mpc.gencost`` matrices).

Everything stored in a :class:`CaseData` is per-unit on ``base_mva``; angles
are in radians and cost coefficients are expressed per per-unit power, so
``c2 * p**2 + c1 * p + c0`` with ``p`` in pu gives $/h directly.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Sequence, Union

__all__ = [
    "Bus",
    "Gen",
    "Branch",
    "CaseData",
    "CaseError",
    "CaseSyntaxError",
    "CaseSemanticError",
    "PreprocessingInfeasible",
    "MergeLog",
    "parse_case",
    "load_case",
    "dump_json",
    "merge_low_impedance",
    "enforce_min_resistance",
]

JSON_VERSION = "lapopf-case/1"


class CaseError(ValueError):
    """Base class for case-data problems."""


class CaseSyntaxError(CaseError):
    """Malformed input text. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseSemanticError(CaseError):
    """Well-formed input that violates a data invariant."""


class PreprocessingInfeasible(CaseError):
    """A preprocessing step produced contradictory data (e.g. empty voltage band)."""


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    vmin: float = 0.9
    vmax: float = 1.1
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    is_reference: bool = False


@dataclass(frozen=True)
class Gen:
    bus: int
    pmin: float = 0.0
    pmax: float = 0.0
    qmin: float = 0.0
    qmax: float = 0.0
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    tau: float = 1.0
    theta_shift: float = 0.0
    s_max: float = 0.0  # 0 means unlimited

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)

    @property
    def g(self) -> float:
        return self.series_admittance.real

    @property
    def b(self) -> float:
        return self.series_admittance.imag

    @property
    def impedance(self) -> float:
        return abs(complex(self.r, self.x))


@dataclass(frozen=True)
class CaseData:
    """An OPF instance in per-unit.

    Buses keep their external ids; ``bus_index`` maps an id to its position,
    which is the ordering used by every matrix in the package.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    gens: tuple[Gen, ...]
    branches: tuple[Branch, ...]
    version: str = JSON_VERSION
    name: str = "case"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "gens", tuple(self.gens))
        object.__setattr__(self, "branches", tuple(self.branches))
        _validate(self)
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def bus_index(self) -> dict[int, int]:
        return self._index

    @property
    def reference_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_reference)

    def gens_at(self, bus_id: int) -> list[Gen]:
        return [g for g in self.gens if g.bus == bus_id]

    def total_load(self) -> tuple[float, float]:
        return (math.fsum(b.p_load for b in self.buses), math.fsum(b.q_load for b in self.buses))


def _validate(case: CaseData) -> None:
    if not (case.base_mva > 0 and math.isfinite(case.base_mva)):
        raise CaseSemanticError(f"base_mva must be positive, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseSemanticError(f"duplicate bus ids: {dup[:10]}")
    nref = sum(b.is_reference for b in case.buses)
    if nref != 1:
        raise CaseSemanticError(f"exactly one reference bus required, found {nref}")
    for b in case.buses:
        if not (0 < b.vmin <= b.vmax):
            raise CaseSemanticError(f"bus {b.id}: need 0 < vmin <= vmax, got {b.vmin}, {b.vmax}")
    known = set(ids)
    for g in case.gens:
        if g.bus not in known:
            raise CaseSemanticError(f"generator references missing bus {g.bus}")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            raise CaseSemanticError(f"generator at bus {g.bus}: inverted limits")
        if g.c2 < 0:
            raise CaseSemanticError(f"generator at bus {g.bus}: nonconvex cost (c2 = {g.c2} < 0)")
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseSemanticError(f"branch {k} references missing bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"branch {k} is a self-loop at bus {br.from_bus}")
        if not br.tau > 0:
            raise CaseSemanticError(f"branch {k}: turns ratio must be positive")
        if not br.r * br.r + br.x * br.x > 0:
            raise CaseSemanticError(f"branch {k}: zero series impedance")
        if br.s_max < 0:
            raise CaseSemanticError(f"branch {k}: negative flow limit")


# --------------------------------------------------------------------------
# JSON


def _case_from_dict(d: dict) -> CaseData:
    try:
        buses = [Bus(**b) for b in d["buses"]]
        gens = [Gen(**g) for g in d.get("gens", [])]
        branches = [Branch(**br) for br in d.get("branches", [])]
        return CaseData(
            base_mva=float(d["base_mva"]),
            buses=buses,
            gens=gens,
            branches=branches,
            version=d.get("version", JSON_VERSION),
            name=d.get("name", "case"),
        )
    except (KeyError, TypeError) as exc:
        raise CaseSemanticError(f"invalid case object: {exc}") from exc


def case_to_dict(case: CaseData) -> dict:
    return {
        "version": case.version,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [asdict(b) for b in case.buses],
        "gens": [asdict(g) for g in case.gens],
        "branches": [asdict(br) for br in case.branches],
    }


def dump_json(case: CaseData, indent: int | None = 1) -> str:
    # repr-exact floats; json uses float.__repr__ so the round trip is lossless
    return json.dumps(case_to_dict(case), indent=indent)


def _parse_json(text: str) -> CaseData:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"{exc.msg} (column {exc.colno})", line=exc.lineno) from exc
    if not isinstance(d, dict):
        raise CaseSyntaxError("top-level JSON value must be an object", line=1)
    return _case_from_dict(d)


# --------------------------------------------------------------------------
# MATPOWER

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comment(line: str) -> str:
    # '%' inside quoted strings does not occur in the numeric tables we read
    out, quote = [], False
    for ch in line:
        if ch == "'":
            quote = not quote
        elif ch == "%" and not quote:
            break
        out.append(ch)
    return "".join(out)


def _read_matpower_tables(text: str) -> tuple[dict[str, float | str], dict[str, list[list[float]]]]:
    lines = [_strip_comment(l) for l in text.splitlines()]
    scalars: dict[str, float | str] = {}
    tables: dict[str, list[list[float]]] = {}
    i = 0
    while i < len(lines):
        line = lines[i]
        m = _ASSIGN.search(line)
        if not m:
            i += 1
            continue
        name, rest = m.group(1), line[m.end():].strip()
        start = i + 1
        if rest.startswith("["):
            body, rest = [], rest[1:]
            while "]" not in rest:
                body.append((i + 1, rest))
                i += 1
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated matrix mpc.{name}", line=start)
                rest = lines[i]
            body.append((i + 1, rest[: rest.index("]")]))
            tables[name] = _parse_rows(name, body)
        elif rest.startswith("{"):
            # cell arrays (bus names etc.) are not needed; skip to the closing brace
            while "}" not in rest:
                i += 1
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated cell array mpc.{name}", line=start)
                rest = lines[i]
        else:
            value = rest.rstrip(";").strip()
            if value.startswith("'"):
                scalars[name] = value.strip("'")
            else:
                try:
                    scalars[name] = float(value)
                except ValueError:
                    raise CaseSyntaxError(f"cannot parse value of mpc.{name}: {value!r}", line=start)
        i += 1
    return scalars, tables


def _parse_rows(name: str, body: list[tuple[int, str]]) -> list[list[float]]:
    rows: list[list[float]] = []
    current: list[float] = []
    for lineno, text in body:
        for chunk_no, chunk in enumerate(text.split(";")):
            if chunk_no > 0 and current:
                rows.append(current)
                current = []
            for tok in chunk.replace(",", " ").split():
                if tok == "...":
                    continue
                try:
                    current.append(float(tok))
                except ValueError:
                    raise CaseSyntaxError(f"non-numeric entry {tok!r} in mpc.{name}", line=lineno) from None
        # a newline ends a row as well
        if current:
            rows.append(current)
            current = []
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise CaseSyntaxError(f"ragged rows in mpc.{name}: widths {sorted(widths)}", line=body[0][0])
    return rows


def _parse_matpower(text: str, name: str) -> CaseData:
    scalars, tables = _read_matpower_tables(text)
    for req in ("bus", "gen", "branch", "gencost"):
        if req not in tables:
            raise CaseSyntaxError(f"missing matrix mpc.{req}")
    if "baseMVA" not in scalars:
        raise CaseSyntaxError("missing mpc.baseMVA")
    base = float(scalars["baseMVA"])
    if not base > 0:
        raise CaseSemanticError(f"base_mva must be positive, got {base}")

    bus_rows = [r for r in tables["bus"] if int(r[1]) != 4]  # type 4 = isolated
    live = {int(r[0]) for r in bus_rows}
    buses = []
    for r in bus_rows:
        if len(r) < 13:
            raise CaseSyntaxError("mpc.bus needs 13 columns")
        buses.append(
            Bus(
                id=int(r[0]),
                p_load=r[2] / base,
                q_load=r[3] / base,
                g_shunt=r[4] / base,
                b_shunt=r[5] / base,
                vmax=r[11],
                vmin=r[12],
                is_reference=int(r[1]) == 3,
            )
        )

    gen_rows, cost_rows = tables["gen"], tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseSemanticError("mpc.gencost has fewer rows than mpc.gen")
    gens = []
    for r, c in zip(gen_rows, cost_rows):  # extra gencost rows are reactive costs
        if len(r) < 10:
            raise CaseSyntaxError("mpc.gen needs at least 10 columns")
        if r[7] <= 0 or int(r[0]) not in live:
            continue
        gens.append(Gen(bus=int(r[0]), qmax=r[3] / base, qmin=r[4] / base, pmax=r[8] / base,
                        pmin=r[9] / base, **_quadratic_cost(c, base)))

    branches = []
    for r in tables["branch"]:
        if len(r) < 11:
            raise CaseSyntaxError("mpc.branch needs at least 11 columns")
        if r[10] <= 0 or int(r[0]) not in live or int(r[1]) not in live:
            continue
        branches.append(
            Branch(
                from_bus=int(r[0]),
                to_bus=int(r[1]),
                r=r[2],
                x=r[3],
                b_sh=r[4],
                s_max=r[5] / base,
                tau=r[8] if r[8] != 0 else 1.0,
                theta_shift=math.radians(r[9]),
            )
        )
    return CaseData(base_mva=base, buses=buses, gens=gens, branches=branches,
                    version=f"matpower-{scalars.get('version', '2')}", name=name)


def _quadratic_cost(row: Sequence[float], base: float) -> dict[str, float]:
    model = int(row[0])
    if model != 2:
        raise CaseSemanticError("only polynomial (model 2) generator costs are supported; "
                                "piecewise-linear gencost rows are rejected")
    ncost = int(row[3])
    coeffs = list(row[4:4 + ncost])
    if len(coeffs) != ncost:
        raise CaseSyntaxError("gencost row shorter than its declared coefficient count")
    if ncost > 3 and any(c != 0 for c in coeffs[: ncost - 3]):
        raise CaseSemanticError("only quadratic generator costs are supported")
    coeffs = [0.0] * max(0, 3 - ncost) + coeffs[-3:]
    c2, c1, c0 = coeffs
    return {"c2": c2 * base * base, "c1": c1 * base, "c0": c0}


# --------------------------------------------------------------------------
# public parsing entry points

Source = Union[str, bytes, IO[str], IO[bytes]]


def parse_case(source: Source, fmt: str, name: str = "case") -> CaseData:
    """Parse a case from text, bytes or a file object.

    ``fmt`` is ``"json"`` or ``"matpower_m"``. Raises :class:`CaseSyntaxError`
    for malformed input and :class:`CaseSemanticError` for invariant
    violations (dangling bus references, no reference bus, ``c2 < 0``).
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CaseSyntaxError(f"input is not UTF-8: {exc}") from exc
    if fmt == "json":
        return _parse_json(source)
    if fmt == "matpower_m":
        return _parse_matpower(source, name)
    raise ValueError(f"unknown case format {fmt!r}")


def load_case(path: str | os.PathLike) -> CaseData:
    """Read a case file, choosing the format from the extension (.json or .m)."""
    path = os.fspath(path)
    stem, ext = os.path.splitext(os.path.basename(path))
    fmt = {".json": "json", ".m": "matpower_m"}.get(ext.lower())
    if fmt is None:
        raise ValueError(f"cannot infer case format from extension {ext!r}")
    with open(path, "rb") as fh:
        case = parse_case(fh, fmt, name=stem)
    return case


# --------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class MergeLog:
    thrshz: float
    buses_before: int
    branches_before: int
    buses_after: int
    branches_after: int
    merged: tuple[tuple[int, tuple[int, ...]], ...] = ()  # (surviving id, absorbed ids)

    def as_dict(self) -> dict:
        return {
            "thrshz": self.thrshz,
            "buses_before": self.buses_before,
            "branches_before": self.branches_before,
            "buses_after": self.buses_after,
            "branches_after": self.branches_after,
            "merged": [[keep, list(gone)] for keep, gone in self.merged],
        }


def merge_low_impedance(case: CaseData, thrshz: float = 1e-3) -> tuple[CaseData, MergeLog]:
    """Merge the terminal buses of every branch with ``|r + jx| < thrshz``.

    The surviving bus takes the smallest id of its group, sums the loads and
    shunts, and intersects the voltage bands. Generators move to the survivor
    but stay separate. Branches that end up inside a merged group are dropped.
    """
    if thrshz < 0:
        raise ValueError("thrshz must be nonnegative")
    parent = {b.id: b.id for b in case.buses}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for br in case.branches:
        if br.impedance < thrshz:
            a, b = find(br.from_bus), find(br.to_bus)
            if a != b:
                parent[max(a, b)] = min(a, b)

    groups: dict[int, list[Bus]] = {}
    for bus in case.buses:
        groups.setdefault(find(bus.id), []).append(bus)

    new_buses, merged = [], []
    for bus in case.buses:
        root = find(bus.id)
        if root != bus.id:
            continue
        members = groups[root]
        if len(members) == 1:
            new_buses.append(bus)
            continue
        vmin = max(m.vmin for m in members)
        vmax = min(m.vmax for m in members)
        if vmin > vmax:
            raise PreprocessingInfeasible(
                f"merging buses {[m.id for m in members]} leaves an empty voltage band [{vmin}, {vmax}]")
        new_buses.append(
            Bus(
                id=root,
                p_load=math.fsum(m.p_load for m in members),
                q_load=math.fsum(m.q_load for m in members),
                g_shunt=math.fsum(m.g_shunt for m in members),
                b_shunt=math.fsum(m.b_shunt for m in members),
                vmin=vmin,
                vmax=vmax,
                is_reference=any(m.is_reference for m in members),
            )
        )
        merged.append((root, tuple(sorted(m.id for m in members if m.id != root))))

    if not merged:
        log = MergeLog(thrshz, case.n_bus, case.n_branch, case.n_bus, case.n_branch)
        return case, log

    new_branches = []
    for br in case.branches:
        a, b = find(br.from_bus), find(br.to_bus)
        if a == b:
            continue
        new_branches.append(replace(br, from_bus=a, to_bus=b))
    new_gens = [replace(g, bus=find(g.bus)) for g in case.gens]
    out = CaseData(base_mva=case.base_mva, buses=new_buses, gens=new_gens, branches=new_branches,
                   version=case.version, name=case.name)
    log = MergeLog(thrshz, case.n_bus, case.n_branch, out.n_bus, out.n_branch, tuple(merged))
    return out, log


def enforce_min_resistance(case: CaseData, eps_r: float) -> CaseData:
    """Raise every branch resistance below ``eps_r`` to ``eps_r``."""
    if eps_r < 0:
        raise ValueError("eps_r must be nonnegative")
    if not any(br.r < eps_r for br in case.branches):
        return case
    branches = [replace(br, r=eps_r) if br.r < eps_r else br for br in case.branches]
    return replace(case, branches=branches)
