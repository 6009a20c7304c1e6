"""Distribution feeder model, text format, validation and admittance assembly.

Quantities are stored as written in the feeder file (kV, kW, kvar) except for
branch admittance blocks, which are already per-unit. Everything downstream of
``build_admittance`` works in per-unit on ``Feeder.base_kva``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable

import networkx as nx
import numpy as np
import scipy.sparse as sp

PHASES = ("A", "B", "C")
PHASE_INDEX = {p: k for k, p in enumerate(PHASES)}

BUS_KINDS = ("slack", "load")

_ZERO_BLOCK = (0j,) * 9


class FeederError(Exception):
    """Base class for feeder problems."""


class FeederFormatError(FeederError):
    """Syntax or reference problem in a feeder document."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class FeederValidationError(FeederError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid feeder: " + "; ".join(violations))


class SingularNodeError(FeederError):
    """A node-phase has an all-zero admittance row."""

    def __init__(self, nodes: list[tuple[str, str]]):
        self.nodes = nodes
        names = ", ".join(f"{b}.{p}" for b, p in nodes)
        super().__init__(f"singular node-phase rows: {names}")


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    kind: str
    base_kv: float

    def __post_init__(self):
        ordered = tuple(p for p in PHASES if p in self.phases)
        if not ordered or len(ordered) != len(self.phases):
            raise FeederError(f"bus {self.id}: bad phase set {self.phases!r}")
        object.__setattr__(self, "phases", ordered)


@dataclass(frozen=True)
class Branch:
    """Two-terminal element described by per-unit 3x3 admittance blocks.

    ``series`` and ``shunt`` are row-major tuples of 9 complex entries. The
    shunt block is the line total; each terminal receives half of it.
    """

    from_bus: str
    to_bus: str
    series: tuple[complex, ...]
    shunt: tuple[complex, ...] = _ZERO_BLOCK

    def __post_init__(self):
        for name in ("series", "shunt"):
            block = tuple(complex(v) for v in getattr(self, name))
            if len(block) != 9:
                raise FeederError(f"branch {self.from_bus}-{self.to_bus}: {name} block needs 9 entries")
            object.__setattr__(self, name, block)

    @classmethod
    def from_blocks(cls, from_bus: str, to_bus: str, series, shunt=None) -> "Branch":
        series = np.asarray(series, dtype=complex).reshape(9)
        shunt = np.zeros(9, complex) if shunt is None else np.asarray(shunt, dtype=complex).reshape(9)
        return cls(from_bus, to_bus, tuple(series.tolist()), tuple(shunt.tolist()))

    @property
    def series_block(self) -> np.ndarray:
        return np.array(self.series, dtype=complex).reshape(3, 3)

    @property
    def shunt_block(self) -> np.ndarray:
        return np.array(self.shunt, dtype=complex).reshape(3, 3)

    @property
    def has_shunt(self) -> bool:
        return any(v != 0 for v in self.shunt)


@dataclass(frozen=True)
class Load:
    bus: str
    phase: str
    kw: float
    kvar: float
    shape_id: str


@dataclass(frozen=True)
class Feeder:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    slack_bus: str
    base_kva: float
    source_vmag_pu: float = 1.0
    source_vang_deg: float = 0.0
    _bus_map: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "_bus_map", {b.id: b for b in self.buses})

    def bus(self, bus_id: str) -> Bus:
        return self._bus_map[bus_id]

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    def bus_order(self) -> dict[str, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    def node_phases(self) -> list[tuple[str, str]]:
        """Compact node-phase index: buses in declaration order, phases A/B/C."""
        return [(b.id, p) for b in self.buses for p in b.phases]

    def loads_at(self, bus_id: str) -> list[int]:
        return [k for k, ld in enumerate(self.loads) if ld.bus == bus_id]

    def graph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(self.bus_ids)
        for k, br in enumerate(self.branches):
            g.add_edge(br.from_bus, br.to_bus, key=k)
        return g

    def slack_phasors(self) -> np.ndarray:
        """Source voltage for phases A, B, C (per-unit), B lagging by 120 degrees."""
        ang = math.radians(self.source_vang_deg)
        shifts = np.radians([0.0, -120.0, 120.0])
        return self.source_vmag_pu * np.exp(1j * (ang + shifts))

    def digest(self) -> str:
        return hashlib.sha256(serialize_feeder(self).encode()).hexdigest()


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_SECTIONS = ("buses", "branches", "loads", "source")


def _strip_comment(line: str) -> str:
    pos = line.find("#")
    return line if pos < 0 else line[:pos]


def _tokens(line: str) -> list[tuple[str, int]]:
    """Split on whitespace, returning (token, 1-based column)."""
    out = []
    col = 0
    n = len(line)
    while col < n:
        while col < n and line[col].isspace():
            col += 1
        start = col
        while col < n and not line[col].isspace():
            col += 1
        if col > start:
            out.append((line[start:col], start + 1))
    return out


def iter_sections(text: str) -> Iterable[tuple[str, int, list[tuple[str, int]]]]:
    """Yield (section, line number, tokens) for every non-blank line.

    Shared by the feeder and run-configuration readers.
    """
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise FeederFormatError("unterminated section header", lineno, line.index("[") + 1)
            section = stripped[1:-1].strip().lower()
            continue
        if section is None:
            raise FeederFormatError("content before first section header", lineno, 1)
        yield section, lineno, _tokens(line)


def _float(tok: str, lineno: int, col: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise FeederFormatError(f"expected number for {what}, got {tok!r}", lineno, col) from None


def _complex(tok: str, lineno: int, col: int) -> complex:
    try:
        return complex(tok)
    except ValueError:
        raise FeederFormatError(f"bad complex literal {tok!r}", lineno, col) from None


def parse_feeder(text: str) -> Feeder:
    """Parse and validate a feeder document."""
    buses: list[Bus] = []
    branches: list[Branch] = []
    loads: list[Load] = []
    source: dict[str, tuple[str, int, int]] = {}
    bus_lines: dict[str, int] = {}
    branch_lines: list[int] = []
    load_lines: list[int] = []

    for section, lineno, toks in iter_sections(text):
        if section not in _SECTIONS:
            raise FeederFormatError(f"unknown section [{section}]", lineno, 1)
        if section == "buses":
            if len(toks) != 4:
                raise FeederFormatError("bus line needs: id phases kind base_kv", lineno, toks[0][1])
            (bid, _), (ph, phcol), (kind, kcol), (kv, kvcol) = toks
            if bid in bus_lines:
                raise FeederFormatError(
                    f"duplicate bus id {bid!r} (first on line {bus_lines[bid]})", lineno, toks[0][1]
                )
            phases = tuple(ph.upper())
            if not phases or any(p not in PHASES for p in phases) or len(set(phases)) != len(phases):
                raise FeederFormatError(f"bad phase set {ph!r}", lineno, phcol)
            if kind not in BUS_KINDS:
                raise FeederFormatError(f"bus kind must be slack or load, got {kind!r}", lineno, kcol)
            base_kv = _float(kv, lineno, kvcol, "base_kv")
            if not base_kv > 0:
                raise FeederFormatError(f"base_kv must be positive, got {kv}", lineno, kvcol)
            bus_lines[bid] = lineno
            buses.append(Bus(bid, phases, kind, base_kv))
        elif section == "branches":
            if len(toks) not in (11, 20):
                raise FeederFormatError(
                    f"branch line needs from, to, 9 series entries and optionally 9 shunt entries; got {len(toks)} fields",
                    lineno,
                    toks[0][1],
                )
            vals = [_complex(t, lineno, c) for t, c in toks[2:]]
            shunt = vals[9:] if len(vals) == 18 else list(_ZERO_BLOCK)
            branches.append(Branch(toks[0][0], toks[1][0], tuple(vals[:9]), tuple(shunt)))
            branch_lines.append(lineno)
        elif section == "loads":
            if len(toks) != 5:
                raise FeederFormatError("load line needs: bus phase kw kvar shape_id", lineno, toks[0][1])
            (bid, _), (ph, phcol), (kw, kwcol), (kvar, kvcol), (shape, _) = toks
            if ph.upper() not in PHASES:
                raise FeederFormatError(f"bad load phase {ph!r}", lineno, phcol)
            loads.append(
                Load(bid, ph.upper(), _float(kw, lineno, kwcol, "kw"), _float(kvar, lineno, kvcol, "kvar"), shape)
            )
            load_lines.append(lineno)
        else:
            if len(toks) != 2:
                raise FeederFormatError("source line needs: key value", lineno, toks[0][1])
            key = toks[0][0].lower()
            if key in source:
                raise FeederFormatError(f"duplicate source key {key!r}", lineno, toks[0][1])
            source[key] = (toks[1][0], lineno, toks[1][1])

    for key in source:
        if key not in ("bus", "base_kva", "vmag_pu", "vang_deg"):
            _, lineno, col = source[key]
            raise FeederFormatError(f"unknown source key {key!r}", lineno, 1)
    for key in ("bus", "base_kva"):
        if key not in source:
            raise FeederFormatError(f"[source] section must define {key!r}")

    slack, slack_line, slack_col = source["bus"]
    if slack not in bus_lines:
        raise FeederFormatError(f"source bus {slack!r} is not a declared bus", slack_line, slack_col)
    base_kva = _float(*source["base_kva"], what="base_kva")
    if not base_kva > 0:
        _, lineno, col = source["base_kva"]
        raise FeederFormatError("base_kva must be positive", lineno, col)
    vmag = _float(*source["vmag_pu"], what="vmag_pu") if "vmag_pu" in source else 1.0
    if not vmag > 0:
        _, lineno, col = source["vmag_pu"]
        raise FeederFormatError("vmag_pu must be positive", lineno, col)
    vang = _float(*source["vang_deg"], what="vang_deg") if "vang_deg" in source else 0.0

    for br, lineno in zip(branches, branch_lines):
        for end in (br.from_bus, br.to_bus):
            if end not in bus_lines:
                raise FeederFormatError(f"branch references unknown bus {end!r}", lineno)
    for ld, lineno in zip(loads, load_lines):
        if ld.bus not in bus_lines:
            raise FeederFormatError(f"load references unknown bus {ld.bus!r}", lineno)

    f = Feeder(tuple(buses), tuple(branches), tuple(loads), slack, base_kva, vmag, vang)
    problems = validate_feeder(f)
    if problems:
        raise FeederValidationError(problems)
    return f


def load_feeder(path) -> Feeder:
    with open(path, encoding="utf-8") as fh:
        return parse_feeder(fh.read())


def _fmt_complex(c: complex) -> str:
    sign = "-" if math.copysign(1.0, c.imag) < 0 else "+"
    return f"{c.real!r}{sign}{abs(c.imag)!r}j"


def serialize_feeder(f: Feeder) -> str:
    lines = ["[source]", f"bus {f.slack_bus}", f"base_kva {f.base_kva!r}"]
    lines += [f"vmag_pu {f.source_vmag_pu!r}", f"vang_deg {f.source_vang_deg!r}", "", "[buses]"]
    for b in f.buses:
        lines.append(f"{b.id} {''.join(b.phases)} {b.kind} {b.base_kv!r}")
    lines += ["", "[branches]"]
    for br in f.branches:
        entries = list(br.series) + (list(br.shunt) if br.has_shunt else [])
        lines.append(f"{br.from_bus} {br.to_bus} " + " ".join(_fmt_complex(v) for v in entries))
    lines += ["", "[loads]"]
    for ld in f.loads:
        lines.append(f"{ld.bus} {ld.phase} {ld.kw!r} {ld.kvar!r} {ld.shape_id}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_feeder(f: Feeder) -> list[str]:
    """Return human-readable violations; an empty list means the feeder is usable."""
    out: list[str] = []
    ids = [b.id for b in f.buses]
    known = set(ids)
    if len(known) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        out.append(f"duplicate bus ids: {', '.join(dup)}")

    slacks = [b.id for b in f.buses if b.kind == "slack"]
    if len(slacks) == 0:
        out.append("no slack bus")
    elif len(slacks) > 1:
        out.append(f"multiple slack buses: {', '.join(slacks)}")
    if f.slack_bus not in known:
        out.append(f"source bus {f.slack_bus} does not exist")
    elif f.bus(f.slack_bus).kind != "slack":
        out.append(f"source bus {f.slack_bus} is not of kind slack")
    if not f.base_kva > 0:
        out.append("base_kva must be positive")
    for b in f.buses:
        if not b.base_kv > 0:
            out.append(f"bus {b.id}: base_kv must be positive")

    for k, br in enumerate(f.branches):
        tag = f"branch {k} ({br.from_bus}-{br.to_bus})"
        if br.from_bus not in known or br.to_bus not in known:
            out.append(f"{tag}: references unknown bus")
            continue
        if br.from_bus == br.to_bus:
            out.append(f"{tag}: self loop")
        ys = br.series_block
        if not np.array_equal(ys, ys.T):
            out.append(f"{tag}: series block is not symmetric")
        common = set(f.bus(br.from_bus).phases) & set(f.bus(br.to_bus).phases)
        if not common:
            out.append(f"{tag}: endpoints share no phase")
        absent = [PHASE_INDEX[p] for p in PHASES if p not in common]
        for block_name, block in (("series", ys), ("shunt", br.shunt_block)):
            if absent and (np.any(block[absent, :] != 0) or np.any(block[:, absent] != 0)):
                out.append(f"{tag}: {block_name} block has entries for phases absent at an endpoint")

    for ld in f.loads:
        if ld.bus not in known:
            out.append(f"load at unknown bus {ld.bus}")
        elif ld.phase not in f.bus(ld.bus).phases:
            out.append(f"load at {ld.bus} on phase {ld.phase} not present at the bus")
        elif ld.bus == f.slack_bus:
            out.append(f"load at slack bus {ld.bus}")

    if f.slack_bus in known and not out:
        g = f.graph()
        reach = nx.node_connected_component(g, f.slack_bus)
        missing = [i for i in ids if i not in reach]
        if missing:
            out.append(f"feeder is disconnected; unreachable from {f.slack_bus}: {', '.join(missing)}")
    return out


# ---------------------------------------------------------------------------
# admittance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    matrix: sp.csr_matrix
    index: tuple[tuple[str, str], ...]

    @property
    def position(self) -> dict[tuple[str, str], int]:
        return {np_: k for k, np_ in enumerate(self.index)}

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def build_admittance(f: Feeder, check_singular: bool = True) -> AdmittanceMatrix:
    """Assemble the compact node-phase admittance matrix.

    Blocks are stamped into a full 3-phase-per-bus space first; rows for
    absent phases are structurally zero there and are dropped by the final
    index map.
    """
    order = f.bus_order()
    # accumulate in branch order so the result is reproducible bit for bit
    acc: dict[tuple[int, int], complex] = {}

    def stamp(r: int, c: int, v: complex) -> None:
        acc[(r, c)] = acc.get((r, c), 0j) + v

    for br in f.branches:
        i, j = order[br.from_bus], order[br.to_bus]
        ys = br.series_block
        diag = ys + 0.5 * br.shunt_block
        for p in range(3):
            for q in range(3):
                if diag[p, q] != 0:
                    stamp(3 * i + p, 3 * i + q, diag[p, q])
                    stamp(3 * j + p, 3 * j + q, diag[p, q])
                if ys[p, q] != 0:
                    stamp(3 * i + p, 3 * j + q, -ys[p, q])
                    stamp(3 * j + p, 3 * i + q, -ys[p, q])
    n3 = 3 * len(f.buses)
    keys = list(acc)
    full = sp.csr_matrix(
        (
            np.array([acc[k] for k in keys], dtype=complex),
            (np.array([k[0] for k in keys], dtype=int), np.array([k[1] for k in keys], dtype=int)),
        ),
        shape=(n3, n3),
    )

    index = tuple(f.node_phases())
    keep = np.array([3 * order[b] + PHASE_INDEX[p] for b, p in index], dtype=int)
    y = full[keep][:, keep].tocsr()
    y.sort_indices()

    if check_singular:
        nnz_rows = np.diff(y.indptr)
        empty = []
        for k in np.flatnonzero(nnz_rows == 0):
            empty.append(index[k])
        for k in np.flatnonzero(nnz_rows > 0):
            if not np.any(y.data[y.indptr[k] : y.indptr[k + 1]] != 0):
                empty.append(index[k])
        if empty:
            raise SingularNodeError(empty)
    return AdmittanceMatrix(y, index)
