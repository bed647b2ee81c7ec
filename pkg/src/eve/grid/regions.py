"""Region variable sets, selection matrices, sensor placement and the
aggregator communication graph."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import UnknownRegion
from .powerflow import BUS_KINDS, n_vars, physics_matrix, var_index
from .topology import GridTopology

log = logging.getLogger(__name__)

MEASURABLE_LINE_KINDS = ("P", "Q", "c2")


@dataclass(frozen=True)
class SensorPlan:
    """Measured global variable indices per owning region.

    ``shared`` lists ``(reader_region, bus)`` pairs: the reader also receives
    the bus meter readings of a bus owned by another region. Line meters on
    a tie line are read by the aggregators at both ends.
    """

    measured: dict[int, tuple[int, ...]]
    shared: tuple[tuple[int, int], ...] = ()

    def readings_for(self, topology: GridTopology, region: int) -> tuple[int, ...]:
        idx = set(self.measured.get(region, ()))
        own = set(topology.buses_of(region))
        nb = 3 * topology.n_bus
        for j in self.all_measured:
            if j >= nb:
                ln = topology.lines[(j - nb) % topology.n_line]
                if ln.frm in own or ln.to in own:
                    idx.add(j)
        for reader, bus in self.shared:
            if reader == region:
                for kind in BUS_KINDS:
                    j = var_index(topology, kind, bus)
                    if j not in self.all_measured:
                        raise UnknownRegion(f"shared bus {bus} has no {kind} meter")
                    idx.add(j)
        return tuple(sorted(idx))

    @property
    def all_measured(self) -> frozenset[int]:
        return frozenset(itertools.chain.from_iterable(self.measured.values()))

    def to_json(self) -> dict:
        return {"measured": {str(k): list(v) for k, v in self.measured.items()},
                "shared": [list(s) for s in self.shared]}

    @classmethod
    def from_json(cls, obj: dict) -> SensorPlan:
        return cls({int(k): tuple(int(i) for i in v) for k, v in obj["measured"].items()},
                   tuple((int(a), int(b)) for a, b in obj.get("shared", ())))


@dataclass
class RegionMatrices:
    region: int
    var_idx: np.ndarray      # global indices making up x^(n), ascending
    H: np.ndarray            # physics rows fully supported on x^(n)
    S: np.ndarray            # l_n x L selection of x^(n) from the global vector
    S_A: np.ndarray          # measured coordinates
    S_P: np.ndarray          # own-bus real injections, bus-id order
    S_nm: dict[int, np.ndarray]
    d: np.ndarray            # diagonal of D
    meas_idx: np.ndarray     # global indices measured, in S_A row order
    own_buses: tuple[int, ...]
    shared_idx: dict[int, np.ndarray] = field(default_factory=dict)  # m -> global indices

    @property
    def l(self) -> int:
        return len(self.var_idx)

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.d)

    @property
    def dbar(self) -> np.ndarray:
        out = np.zeros_like(self.d)
        nz = self.d != 0
        out[nz] = 1.0 / self.d[nz]
        return out

    @property
    def Dbar(self) -> np.ndarray:
        return np.diag(self.dbar)

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(sorted(self.S_nm))

    def local(self, global_idx) -> np.ndarray:
        """Positions within x^(n) of the given global indices."""
        return np.searchsorted(self.var_idx, np.asarray(global_idx))

    def p_local(self) -> np.ndarray:
        return np.argmax(self.S_P, axis=1)


def region_variables(topology: GridTopology, region: int,
                     shared: tuple[tuple[int, int], ...] = ()) -> np.ndarray:
    """Own buses, lines touching them, their far-end buses, and shared meters."""
    if region not in topology.regions:
        raise UnknownRegion(f"region {region} not in partition")
    own = set(topology.buses_of(region))
    idx: set[int] = set()
    buses = set(own)
    for k, ln in enumerate(topology.lines):
        if ln.frm in own or ln.to in own:
            buses.update((ln.frm, ln.to))
            idx.update(var_index(topology, kind, k) for kind in ("P", "Q", "c2", "xa"))
    buses.update(b for reader, b in shared if reader == region)
    for b in buses:
        idx.update(var_index(topology, kind, b) for kind in BUS_KINDS)
    return np.array(sorted(idx), dtype=int)


def _selection(rows: np.ndarray, within: np.ndarray) -> np.ndarray:
    S = np.zeros((len(rows), len(within)))
    S[np.arange(len(rows)), np.searchsorted(within, rows)] = 1.0
    return S


def build_region_matrices(topology: GridTopology, region: int, plan: SensorPlan, *,
                          active: tuple[int, ...] | None = None,
                          H_global: np.ndarray | None = None) -> RegionMatrices:
    """Assemble the per-region regression matrices.

    ``active`` restricts neighbor sharing to the listed regions (used after
    an aggregator is isolated).
    """
    active = tuple(topology.regions) if active is None else tuple(active)
    if region not in topology.regions:
        raise UnknownRegion(f"region {region} not in partition")
    H_global = physics_matrix(topology) if H_global is None else H_global
    var_idx = region_variables(topology, region, plan.shared)
    L = n_vars(topology)
    mask = np.zeros(L, dtype=bool)
    mask[var_idx] = True
    support = H_global != 0
    rows = np.where(~np.any(support & ~mask, axis=1) & np.any(support, axis=1))[0]
    H = H_global[np.ix_(rows, var_idx)]

    S = _selection(var_idx, np.arange(L))
    meas = np.array(plan.readings_for(topology, region), dtype=int)
    meas = meas[np.isin(meas, var_idx)]
    S_A = _selection(meas, var_idx)
    own = tuple(topology.buses_of(region))
    p_idx = np.array([var_index(topology, "p", b) for b in own], dtype=int)
    S_P = _selection(p_idx, var_idx)

    S_nm: dict[int, np.ndarray] = {}
    shared_idx: dict[int, np.ndarray] = {}
    d = np.zeros(len(var_idx))
    for m in active:
        if m == region:
            continue
        other = region_variables(topology, m, plan.shared)
        common = np.intersect1d(var_idx, other)
        if len(common) == 0:
            continue
        S_nm[m] = _selection(common, var_idx)
        shared_idx[m] = common
        d[np.searchsorted(var_idx, common)] += 1.0
    return RegionMatrices(region=region, var_idx=var_idx, H=H, S=S, S_A=S_A, S_P=S_P,
                          S_nm=S_nm, d=d, meas_idx=meas, own_buses=own,
                          shared_idx=shared_idx)


def _owned_measurable(topology: GridTopology, region: int) -> tuple[list[int], list[int]]:
    """(boundary, interior) measurable global indices owned by ``region``."""
    own = set(topology.buses_of(region))
    ties = topology.tie_lines()
    edge_buses = {b for k in ties for b in (topology.lines[k].frm, topology.lines[k].to)}
    boundary, interior = [], []
    for b in sorted(own):
        dest = boundary if b in edge_buses else interior
        dest.extend(var_index(topology, kind, b) for kind in BUS_KINDS)
    for k, ln in enumerate(topology.lines):
        if ln.to not in own:
            continue
        dest = boundary if k in ties else interior
        dest.extend(var_index(topology, kind, k) for kind in MEASURABLE_LINE_KINDS)
    return boundary, interior


def place_sensors(topology: GridTopology, *, interior_fraction: float = 0.5, seed: int = 0,
                  shared: tuple[tuple[int, int], ...] = (),
                  complete: bool = True, cond_tol: float = 1e-2) -> SensorPlan:
    """Meters on every boundary variable plus a seeded share of interior ones.

    With ``complete`` set, extra meters are added greedily until each
    region's regression system (physics and schedule terms, consensus left
    out so a region stays solvable after its neighbours are isolated) has
    its smallest eigenvalue above ``cond_tol`` times its largest; weakly
    observed directions otherwise amplify meter noise.
    """
    rng = np.random.default_rng(seed)
    measured: dict[int, tuple[int, ...]] = {}
    for reg in topology.regions:
        boundary, interior = _owned_measurable(topology, reg)
        pick = rng.random(len(interior)) < interior_fraction
        measured[reg] = tuple(sorted(boundary + [i for i, s in zip(interior, pick) if s]))
    # shared meters must exist at the source bus
    for reader, bus in shared:
        owner = topology.region_of[bus]
        extra = [var_index(topology, kind, bus) for kind in BUS_KINDS]
        measured[owner] = tuple(sorted(set(measured[owner]) | set(extra)))
    plan = SensorPlan(measured, tuple(shared))
    if complete:
        plan = complete_observability(topology, plan, cond_tol)
    return plan


def complete_observability(topology: GridTopology, plan: SensorPlan, tol: float = 1e-9) -> SensorPlan:
    H_global = physics_matrix(topology)
    measured = {r: set(v) for r, v in plan.measured.items()}
    for reg in topology.regions:
        _, interior = _owned_measurable(topology, reg)
        boundary, _ = _owned_measurable(topology, reg)
        candidates = set(interior) | set(boundary)
        while True:
            cur = SensorPlan({r: tuple(sorted(v)) for r, v in measured.items()}, plan.shared)
            rm = build_region_matrices(topology, reg, cur, H_global=H_global)
            M = rm.S_A.T @ rm.S_A + rm.H.T @ rm.H + rm.S_P.T @ rm.S_P
            # coordinates no local term touches (neighbour periphery p, q) are decoupled
            live = np.flatnonzero(np.any(M != 0, axis=1))
            w, V = np.linalg.eigh(M[np.ix_(live, live)])
            null = V[:, w < tol * max(1.0, w.max())]
            if null.shape[1] == 0:
                break
            weight = np.zeros(rm.l)
            weight[live] = np.linalg.norm(null, axis=1)
            options = [(weight[rm.local([g])[0]], g) for g in candidates - measured[reg]
                       if weight[rm.local([g])[0]] > 1e-6]
            if not options:
                log.info("region %d keeps %d unobservable directions", reg, null.shape[1])
                break
            measured[reg].add(max(options)[1])
    return SensorPlan({r: tuple(sorted(v)) for r, v in measured.items()}, plan.shared)


@dataclass(frozen=True)
class CommunicationGraph:
    nodes: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    clique3: bool

    def neighbors(self, n: int) -> tuple[int, ...]:
        return tuple(sorted({b for a, b in self.edges if a == n} | {a for a, b in self.edges if b == n}))

    def connected(self) -> bool:
        if not self.nodes:
            return False
        seen = {self.nodes[0]}
        stack = [self.nodes[0]]
        while stack:
            n = stack.pop()
            for m in self.neighbors(n):
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return seen == set(self.nodes)

    def without(self, n: int) -> CommunicationGraph:
        nodes = tuple(v for v in self.nodes if v != n)
        edges = frozenset(e for e in self.edges if n not in e)
        return make_graph(nodes, edges)


def find_triangles(nodes, edges) -> list[tuple[int, int, int]]:
    es = {tuple(sorted(e)) for e in edges}
    return [t for t in itertools.combinations(sorted(nodes), 3)
            if (t[0], t[1]) in es and (t[0], t[2]) in es and (t[1], t[2]) in es]


def make_graph(nodes, edges) -> CommunicationGraph:
    edges = frozenset(tuple(sorted(e)) for e in edges)
    clique3 = bool(find_triangles(nodes, edges))
    if not clique3:
        log.warning("communication graph has no 3-clique; attacker ranking may be ambiguous")
    return CommunicationGraph(tuple(sorted(nodes)), edges, clique3)


def build_communication_graph(topology: GridTopology, plan: SensorPlan | None = None,
                              extra_edges=()) -> CommunicationGraph:
    shared = plan.shared if plan is not None else ()
    vars_of = {r: set(region_variables(topology, r, shared).tolist()) for r in topology.regions}
    edges = {(a, b) for a, b in itertools.combinations(topology.regions, 2) if vars_of[a] & vars_of[b]}
    edges.update(tuple(sorted(e)) for e in extra_edges)
    return make_graph(topology.regions, edges)
