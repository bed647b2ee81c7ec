"""Radial feeder topology, region partition and validation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import CycleDetected, Disconnected, GridError, NonContiguousRegion


@dataclass(frozen=True)
class Line:
    """Directed branch ``frm -> to`` with per-unit series impedance."""

    frm: int
    to: int
    r: float
    x: float

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class GridTopology:
    buses: tuple[int, ...]
    lines: tuple[Line, ...]
    root: int
    region_of: dict[int, int]
    base_mva: float = 1.0
    # nominal (p, q) consumption in MW / MVAr; positive means load
    nominal_load: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @cached_property
    def bus_pos(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.buses)}

    @cached_property
    def regions(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.region_of.values())))

    def buses_of(self, region: int) -> list[int]:
        return [b for b in self.buses if self.region_of[b] == region]

    @cached_property
    def parent_line(self) -> dict[int, int]:
        """Bus id -> index of its unique incoming line (t^-1(b))."""
        return {ln.to: k for k, ln in enumerate(self.lines)}

    @cached_property
    def child_lines(self) -> dict[int, list[int]]:
        """Bus id -> indices of lines leaving it (f^-1(b))."""
        out: dict[int, list[int]] = {b: [] for b in self.buses}
        for k, ln in enumerate(self.lines):
            out[ln.frm].append(k)
        return out

    @cached_property
    def bfs_lines(self) -> list[int]:
        order = []
        queue = deque([self.root])
        while queue:
            b = queue.popleft()
            for k in self.child_lines[b]:
                order.append(k)
                queue.append(self.lines[k].to)
        return order

    @cached_property
    def subtree(self) -> np.ndarray:
        """``S[l, l2] = 1`` when line ``l2`` lies in the subtree hanging off ``l`` (incl. itself)."""
        nl = self.n_line
        S = np.eye(nl)
        for k in reversed(self.bfs_lines):
            for c in self.child_lines[self.lines[k].to]:
                S[k] += S[c]
        return S

    @cached_property
    def children(self) -> np.ndarray:
        """``C[l, l2] = 1`` when line ``l2`` leaves the receiving bus of ``l``."""
        C = np.zeros((self.n_line, self.n_line))
        for k, ln in enumerate(self.lines):
            C[k, self.child_lines[ln.to]] = 1.0
        return C

    @cached_property
    def path(self) -> np.ndarray:
        """``M[b, l] = 1`` when line ``l`` is on the root-to-bus path of bus position ``b``."""
        M = np.zeros((self.n_bus, self.n_line))
        for k in self.bfs_lines:
            ln = self.lines[k]
            M[self.bus_pos[ln.to]] = M[self.bus_pos[ln.frm]]
            M[self.bus_pos[ln.to], k] = 1.0
        return M

    def neighbors(self, bus: int) -> list[int]:
        out = [self.lines[k].to for k in self.child_lines[bus]]
        if bus in self.parent_line:
            out.append(self.lines[self.parent_line[bus]].frm)
        return out

    def tie_lines(self) -> list[int]:
        return [k for k, ln in enumerate(self.lines)
                if self.region_of[ln.frm] != self.region_of[ln.to]]


def _undirected_adjacency(buses, lines) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {b: [] for b in buses}
    for ln in lines:
        adj[ln.frm].append(ln.to)
        adj[ln.to].append(ln.frm)
    return adj


def _connected(nodes: set[int], adj: dict[int, list[int]]) -> bool:
    if not nodes:
        return False
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        b = stack.pop()
        for c in adj[b]:
            if c in nodes and c not in seen:
                seen.add(c)
                stack.append(c)
    return seen == nodes


def validate_radial(topology: GridTopology) -> GridTopology:
    """Check connectivity, radiality and region contiguity.

    Returns a topology whose lines are oriented away from the root, so that
    every non-root bus has exactly one incoming line.
    """
    buses = set(topology.buses)
    if len(buses) != len(topology.buses):
        raise GridError("duplicate bus ids")
    if topology.root not in buses:
        raise GridError(f"root bus {topology.root} not in bus set")
    for ln in topology.lines:
        if ln.frm not in buses or ln.to not in buses:
            raise GridError(f"line {ln.frm}->{ln.to} references unknown bus")
        if ln.frm == ln.to:
            raise CycleDetected(f"self-loop at bus {ln.frm}")
    if len(topology.lines) > len(buses) - 1:
        raise CycleDetected(
            f"{len(topology.lines)} lines for {len(buses)} buses; a radial network has |B|-1")
    adj = _undirected_adjacency(topology.buses, topology.lines)
    if len(topology.lines) < len(buses) - 1 or not _connected(buses, adj):
        raise Disconnected("network graph is not connected")

    # orient every line away from the root
    oriented: list[Line] = []
    seen = {topology.root}
    queue = deque([topology.root])
    by_pair = {}
    for ln in topology.lines:
        by_pair[frozenset((ln.frm, ln.to))] = ln
    while queue:
        b = queue.popleft()
        for c in sorted(adj[b]):
            if c in seen:
                continue
            seen.add(c)
            ln = by_pair[frozenset((b, c))]
            oriented.append(ln if ln.frm == b else Line(b, c, ln.r, ln.x))
            queue.append(c)
    order = {frozenset((ln.frm, ln.to)): i for i, ln in enumerate(topology.lines)}
    oriented.sort(key=lambda ln: order[frozenset((ln.frm, ln.to))])

    missing = buses - set(topology.region_of)
    if missing:
        raise GridError(f"buses without a region: {sorted(missing)[:5]}")
    by_region: dict[int, set[int]] = {}
    for b in topology.buses:
        by_region.setdefault(topology.region_of[b], set()).add(b)
    for reg, members in by_region.items():
        if not _connected(members, adj):
            raise NonContiguousRegion(f"region {reg} is not contiguous")

    return GridTopology(
        buses=tuple(sorted(buses)),
        lines=tuple(oriented),
        root=topology.root,
        region_of={b: topology.region_of[b] for b in sorted(buses)},
        base_mva=topology.base_mva,
        nominal_load=dict(topology.nominal_load),
    )
