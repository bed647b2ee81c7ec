"""Importer for MATPOWER-style case text (bus and branch tables only)."""

from __future__ import annotations

import math
import re
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import GridError
from .topology import GridTopology, Line, validate_radial

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def parse_case_text(text: str) -> dict[str, np.ndarray | float]:
    """Return ``{'baseMVA': float, 'bus': array, 'branch': array, ...}``.

    Only numeric matrices are read; any MATLAB post-processing code in the
    file is ignored, so unit conversions have to be requested explicitly.
    """
    clean = _strip_comments(text)
    out: dict[str, np.ndarray | float] = {}
    m = _SCALAR_RE.search(clean)
    if m is None:
        raise GridError("case text has no baseMVA")
    out["baseMVA"] = float(m.group(1))
    for name, body in _MATRIX_RE.findall(clean):
        rows = [r.split() for r in body.replace("\n", ";").split(";")]
        rows = [[float(v) for v in r] for r in rows if r]
        if rows:
            out[name] = np.array(rows)
    for key in ("bus", "branch"):
        if key not in out:
            raise GridError(f"case text has no {key} table")
    return out


def topology_from_case(case: dict, *, ohms_base_kv: float | None = None,
                       loads_kva_pf: float | None = None,
                       region_of: dict[int, int] | None = None) -> GridTopology:
    """Build a validated topology from parsed case tables.

    ``ohms_base_kv`` converts branch r, x given in Ohms to per unit on that
    voltage base. ``loads_kva_pf`` reads the Pd column as apparent power in
    kVA at the given power factor.
    """
    base_mva = float(case["baseMVA"])
    bus = case["bus"]
    branch = case["branch"]
    ids = [int(b) for b in bus[:, 0]]
    refs = [int(b) for b, t in zip(bus[:, 0], bus[:, 1]) if int(t) == 3]
    if len(refs) != 1:
        raise GridError(f"expected one reference bus, found {len(refs)}")
    zbase = 1.0
    if ohms_base_kv is not None:
        zbase = (ohms_base_kv * 1e3) ** 2 / (base_mva * 1e6)
    lines = []
    for row in branch:
        if len(row) > 10 and row[10] == 0:
            continue  # out of service
        lines.append(Line(int(row[0]), int(row[1]), row[2] / zbase, row[3] / zbase))
    loads = {}
    for row in bus:
        pd, qd = float(row[2]), float(row[3])
        if loads_kva_pf is not None:
            s = pd / 1e3
            pd, qd = s * loads_kva_pf, s * math.sin(math.acos(loads_kva_pf))
        if pd or qd:
            loads[int(row[0])] = (pd, qd)
    topo = GridTopology(
        buses=tuple(sorted(ids)),
        lines=tuple(lines),
        root=refs[0],
        region_of=region_of or {b: 0 for b in ids},
        base_mva=base_mva,
        nominal_load=loads,
    )
    return validate_radial(topo)


def load_case(path: str | Path, **kwargs) -> GridTopology:
    return topology_from_case(parse_case_text(Path(path).read_text()), **kwargs)


# 7-region partition of the 141-bus feeder: each region is the subtree
# below its head bus, minus the subtrees claimed by deeper heads.
CASE141X7_HEADS = {0: 1, 1: 43, 2: 54, 3: 88, 4: 7, 5: 118, 6: 16}
# region 1 also reads the meters at these region-0 / region-2 buses so
# that regions 0 and 1 overlap on four boundary buses
CASE141X7_SHARED_SENSORS = ((1, 54), (1, 73))


def partition_by_heads(topology: GridTopology, heads: dict[int, int]) -> dict[int, int]:
    """Assign every bus to the region of its nearest head on the root path."""
    head_region = {b: r for r, b in heads.items()}
    region_of: dict[int, int] = {}
    for k in [None] + topology.bfs_lines:
        b = topology.root if k is None else topology.lines[k].to
        if b in head_region:
            region_of[b] = head_region[b]
        elif k is None:
            raise GridError("root bus must be a region head")
        else:
            region_of[b] = region_of[topology.lines[k].frm]
    return region_of


def load_case141() -> GridTopology:
    """The 141-bus feeder (p.u. on 10 MVA / 12.47 kV) with the 7-region partition."""
    text = resources.files("eve.grid").joinpath("data/case141.m").read_text()
    topo = topology_from_case(parse_case_text(text), ohms_base_kv=12.47, loads_kva_pf=0.85)
    region_of = partition_by_heads(topo, CASE141X7_HEADS)
    return validate_radial(GridTopology(topo.buses, topo.lines, topo.root, region_of,
                                        topo.base_mva, topo.nominal_load))
