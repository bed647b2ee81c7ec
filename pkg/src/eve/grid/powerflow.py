"""Backward/forward sweep power flow and DistFlow residuals.

Sign convention: bus injections are positive when the bus supplies power.
Flows P, Q are in MW / MVAr, measured at the sending end of each line.
Squared voltages and squared currents are in per unit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, NoConvergence, VoltageCollapse
from .topology import GridTopology

log = logging.getLogger(__name__)

BUS_KINDS = ("p", "q", "v2")
LINE_KINDS = ("P", "Q", "c2", "xa")


@dataclass
class SystemState:
    """Per-bus and per-line quantities; arrays are (n,) or (n, T)."""

    p: np.ndarray
    q: np.ndarray
    v2: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    c2: np.ndarray
    xa: np.ndarray

    def vector(self) -> np.ndarray:
        """Stack into the global variable ordering (kind-major)."""
        return np.concatenate([self.p, self.q, self.v2, self.P, self.Q, self.c2, self.xa])

    @classmethod
    def from_vector(cls, x: np.ndarray, topology: GridTopology) -> SystemState:
        nb, nl = topology.n_bus, topology.n_line
        if x.shape[0] != 3 * nb + 4 * nl:
            raise DimensionMismatch(f"state vector length {x.shape[0]} != {3 * nb + 4 * nl}")
        cuts = np.cumsum([nb, nb, nb, nl, nl, nl])
        return cls(*np.split(np.asarray(x, dtype=float), cuts))

    def copy(self) -> SystemState:
        return SystemState(*(np.array(a, copy=True) for a in
                             (self.p, self.q, self.v2, self.P, self.Q, self.c2, self.xa)))


def n_vars(topology: GridTopology) -> int:
    return 3 * topology.n_bus + 4 * topology.n_line


def var_index(topology: GridTopology, kind: str, element: int) -> int:
    """Global index of variable ``kind`` at bus id (bus kinds) or line index (line kinds)."""
    nb, nl = topology.n_bus, topology.n_line
    if kind in BUS_KINDS:
        return BUS_KINDS.index(kind) * nb + topology.bus_pos[element]
    if kind in LINE_KINDS:
        if not 0 <= element < nl:
            raise IndexError(element)
        return 3 * nb + LINE_KINDS.index(kind) * nl + element
    raise KeyError(kind)


def describe_var(topology: GridTopology, idx: int) -> tuple[str, int]:
    nb, nl = topology.n_bus, topology.n_line
    if idx < 3 * nb:
        return BUS_KINDS[idx // nb], topology.buses[idx % nb]
    j = idx - 3 * nb
    return LINE_KINDS[j // nl], j % nl


def _line_arrays(topology: GridTopology):
    r = np.array([ln.r for ln in topology.lines])
    x = np.array([ln.x for ln in topology.lines])
    frm = np.array([topology.bus_pos[ln.frm] for ln in topology.lines], dtype=int)
    to = np.array([topology.bus_pos[ln.to] for ln in topology.lines], dtype=int)
    return r, x, frm, to


def solve_power_flow(topology: GridTopology, p: np.ndarray, q: np.ndarray, *,
                     v2_root: float = 1.0, max_iter: int = 200,
                     tol: float = 1e-10) -> SystemState:
    """Solve the branch-flow equations by backward/forward sweep.

    ``p`` and ``q`` are bus injections (MW / MVAr) ordered like
    ``topology.buses``; a trailing time axis is allowed. The root entries are
    ignored and replaced by the slack injection that balances the feeder.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.shape[0] != topology.n_bus:
        raise DimensionMismatch(f"injections shape {p.shape}/{q.shape} vs {topology.n_bus} buses")
    S = topology.base_mva
    r, x, frm, to = _line_arrays(topology)
    if p.ndim == 2:
        r, x = r[:, None], x[:, None]
    z2 = r ** 2 + x ** 2
    sub, path = topology.subtree, topology.path
    pu_p, pu_q = p / S, q / S

    c2 = np.zeros((topology.n_line,) + p.shape[1:])
    v2 = np.full(p.shape, v2_root)
    for it in range(max_iter):
        # backward: line flow = downstream net demand plus downstream losses
        Pl = sub @ (-pu_p[to] + r * c2)
        Ql = sub @ (-pu_q[to] + x * c2)
        c2_new = (Pl ** 2 + Ql ** 2) / v2[frm]
        drop = 2 * (r * Pl + x * Ql) - z2 * c2_new
        v2_new = v2_root - path @ drop
        if np.any(v2_new <= 0):
            raise VoltageCollapse(f"squared voltage non-positive at sweep {it}")
        delta = max(np.max(np.abs(v2_new - v2), initial=0.0), np.max(np.abs(c2_new - c2), initial=0.0))
        v2, c2 = v2_new, c2_new
        if delta < tol:
            break
    else:
        raise NoConvergence(f"sweep did not converge in {max_iter} iterations (step {delta:.3e})")
    log.debug("power flow converged in %d sweeps", it + 1)

    # final consistent pass: balance and voltage rows exact for this c2
    Pl = sub @ (-pu_p[to] + r * c2)
    Ql = sub @ (-pu_q[to] + x * c2)
    v2 = v2_root - path @ (2 * (r * Pl + x * Ql) - z2 * c2)
    p_out, q_out = p.copy(), q.copy()
    root = topology.bus_pos[topology.root]
    kids = topology.child_lines[topology.root]
    p_out[root] = Pl[kids].sum(axis=0) * S
    q_out[root] = Ql[kids].sum(axis=0) * S
    # auxiliary variable from the exact quotient; lines without current
    # carry no information and take the sending-end voltage
    with np.errstate(divide="ignore", invalid="ignore"):
        xa = np.where(c2 > 1e-300, (Pl ** 2 + Ql ** 2) / c2, v2[frm])
    return SystemState(p=p_out, q=q_out, v2=v2, P=Pl * S, Q=Ql * S, c2=c2, xa=xa)


def distflow_residual(state: SystemState, topology: GridTopology) -> np.ndarray:
    """Stacked residuals: real balance, reactive balance, voltage drop and
    auxiliary rows (one per line each), then the two root balance rows.

    Balance rows are in MW / MVAr, voltage and auxiliary rows in p.u.
    """
    nb, nl = topology.n_bus, topology.n_line
    for name, n in (("p", nb), ("q", nb), ("v2", nb), ("P", nl), ("Q", nl), ("c2", nl), ("xa", nl)):
        if np.shape(getattr(state, name))[0] != n:
            raise DimensionMismatch(f"state.{name} has length {np.shape(getattr(state, name))[0]}, expected {n}")
    S = topology.base_mva
    r, x, frm, to = _line_arrays(topology)
    P, Q = np.asarray(state.P), np.asarray(state.Q)
    if P.ndim == 2:
        r, x = r[:, None], x[:, None]
    z2 = r ** 2 + x ** 2
    direct = topology.children
    rows_p = state.p[to] + P - direct @ P - r * S * state.c2
    rows_q = state.q[to] + Q - direct @ Q - x * S * state.c2
    rows_v = state.v2[frm] - state.v2[to] - 2 * (r * P + x * Q) / S + z2 * state.c2
    rows_a = state.v2[frm] - state.xa
    kids = topology.child_lines[topology.root]
    root = topology.bus_pos[topology.root]
    root_p = state.p[root] - P[kids].sum(axis=0)
    root_q = state.q[root] - Q[kids].sum(axis=0)
    return np.concatenate([rows_p, rows_q, rows_v, rows_a, root_p[None], root_q[None]])


def balance_row(topology: GridTopology, bus: int) -> int:
    """Residual row index of the real-power balance at ``bus``."""
    if bus == topology.root:
        return 4 * topology.n_line
    return topology.parent_line[bus]


def physics_matrix(topology: GridTopology) -> np.ndarray:
    """Matrix H with ``H @ state.vector() == distflow_residual(state)``."""
    nb, nl = topology.n_bus, topology.n_line
    S = topology.base_mva
    H = np.zeros((4 * nl + 2, n_vars(topology)))
    vi = lambda kind, e: var_index(topology, kind, e)  # noqa: E731
    for k, ln in enumerate(topology.lines):
        kids = topology.child_lines[ln.to]
        for row, (bk, lk, imp) in enumerate((("p", "P", ln.r), ("q", "Q", ln.x))):
            i = row * nl + k
            H[i, vi(bk, ln.to)] = 1.0
            H[i, vi(lk, k)] = 1.0
            for c in kids:
                H[i, vi(lk, c)] = -1.0
            H[i, vi("c2", k)] = -imp * S
        i = 2 * nl + k
        H[i, vi("v2", ln.frm)] = 1.0
        H[i, vi("v2", ln.to)] = -1.0
        H[i, vi("P", k)] = -2 * ln.r / S
        H[i, vi("Q", k)] = -2 * ln.x / S
        H[i, vi("c2", k)] = ln.r ** 2 + ln.x ** 2
        i = 3 * nl + k
        H[i, vi("v2", ln.frm)] = 1.0
        H[i, vi("xa", k)] = -1.0
    for row, (bk, lk) in enumerate((("p", "P"), ("q", "Q"))):
        i = 4 * nl + row
        H[i, vi(bk, topology.root)] = 1.0
        for c in topology.child_lines[topology.root]:
            H[i, vi(lk, c)] = -1.0
    return H
