"""Robust state verification.

Each aggregator fits its local copy of the grid state to its meter
readings, the cleared schedule and the linearised branch-flow physics,
while consensus-form ADMM drives neighbouring copies of shared variables
together. Running disagreement scores between neighbours feed a trust
vector whose outlier marks the most likely attacker, who is then dropped
before the fit is restarted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    EigenNoConvergence,
    GraphDisconnected,
    InsufficientRegions,
    SingularSystem,
    VerificationError,
)
from .grid.powerflow import physics_matrix
from .grid.regions import (
    CommunicationGraph,
    RegionMatrices,
    SensorPlan,
    build_region_matrices,
    make_graph,
)
from .grid.topology import GridTopology

log = logging.getLogger(__name__)


@dataclass
class VerificationConfig:
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 0.5
    c4: float = 0.5
    eps: float = 1e-3
    eps_pi: float = 1e-3
    beta: float = 2.0
    alpha: str | float = "1/k"
    eig_tol: float = 1e-10
    eig_max_iter: int = 1000
    eps_B: float = 1e-16
    guard: float = 0.0
    max_iter: int = 3000
    init: str = "local"
    # the trust vector is scale-free, so honest start-up transients can look
    # like an outlier; T2 waits out the burn-in and needs live disagreement
    t2_burn_in: int = 20
    t2_floor: float = 0.05

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "c4", "eps", "eps_pi", "beta", "eig_tol", "eps_B"):
            if not getattr(self, name) > 0:
                raise VerificationError(f"VerificationConfig.{name} must be positive")
        if self.guard < 0:
            raise VerificationError("VerificationConfig.guard must be non-negative")
        if self.init not in ("local", "backfill", "zeros"):
            raise VerificationError(f"unknown initialisation {self.init!r}")
        if not (self.alpha == "1/k" or (isinstance(self.alpha, (int, float)) and 0 < self.alpha <= 1)):
            raise VerificationError("alpha must be '1/k' or a constant in (0, 1]")

    @classmethod
    def preset(cls, name: str, **overrides) -> VerificationConfig:
        presets = {"default": {}, "strict-verification": {"c3": 1e-3}}
        if name not in presets:
            raise VerificationError(f"unknown verification preset {name!r}")
        return cls(**{**presets[name], **overrides})

    def alpha_k(self, k: int) -> float:
        return 1.0 / k if self.alpha == "1/k" else float(self.alpha)


# ----------------------------------------------------------------------------
# per-region ADMM

@dataclass
class RegionState:
    rm: RegionMatrices
    z: np.ndarray          # (m, T) readings in S_A row order
    var: np.ndarray        # (m,) reading variances
    sched: np.ndarray      # (n_own, T) scheduled own-bus injections
    x: np.ndarray          # (l, T)
    psi: np.ndarray
    ups: np.ndarray
    x_prev: np.ndarray
    k: int = 0
    _factor: tuple | None = field(default=None, repr=False)
    _rhs0: np.ndarray | None = field(default=None, repr=False)

    @property
    def region(self) -> int:
        return self.rm.region

    @property
    def T(self) -> int:
        return self.x.shape[1]

    def shared_slice(self, m: int) -> np.ndarray:
        return self.rm.S_nm[m] @ self.x

    def injections(self) -> np.ndarray:
        return self.rm.S_P @ self.x

    def deviation(self) -> np.ndarray:
        return self.sched - self.injections()


def system_matrix(rm: RegionMatrices, var: np.ndarray, cfg: VerificationConfig) -> np.ndarray:
    W = 1.0 / np.asarray(var, dtype=float)
    M = (cfg.c1 * (rm.S_A.T * W) @ rm.S_A + cfg.c2 * rm.H.T @ rm.H
         + cfg.c3 * rm.S_P.T @ rm.S_P + cfg.c4 * np.diag(rm.d))
    # a coordinate no term touches is decoupled from the rest; pin it at zero
    dead = ~np.any(M != 0, axis=1)
    M[dead, dead] = 1.0
    return M


def _factor(M: np.ndarray, guard: float, region: int):
    try:
        return cho_factor(M, lower=True)
    except LinAlgError:
        pass
    if guard > 0:
        try:
            return cho_factor(M + guard * np.eye(len(M)), lower=True)
        except LinAlgError:
            pass
    raise SingularSystem(f"region {region}: regression matrix is not positive definite")


def _static_rhs(rm, z, var, sched, cfg) -> np.ndarray:
    W = 1.0 / np.asarray(var, dtype=float)
    return cfg.c1 * rm.S_A.T @ (W[:, None] * z) + cfg.c3 * rm.S_P.T @ sched


def consensus_average(rm: RegionMatrices, messages: dict[int, np.ndarray], T: int) -> np.ndarray:
    """D-bar times the sum of the neighbours' copies, lifted into x^(n)."""
    acc = np.zeros((rm.l, T))
    for m, S in rm.S_nm.items():
        if m in messages:
            acc += S.T @ messages[m]
    return rm.dbar[:, None] * acc


def initial_x(rm: RegionMatrices, z, var, sched, cfg: VerificationConfig) -> np.ndarray:
    """Starting point: local fit without consensus, measurement backfill, or zeros."""
    z = np.asarray(z, dtype=float)
    T = z.shape[1] if z.ndim == 2 else np.asarray(sched).shape[1]
    if cfg.init == "zeros":
        return np.zeros((rm.l, T))
    if cfg.init == "backfill":
        return rm.S_A.T @ z
    W = 1.0 / np.asarray(var, dtype=float)
    M = cfg.c1 * (rm.S_A.T * W) @ rm.S_A + cfg.c2 * rm.H.T @ rm.H + cfg.c3 * rm.S_P.T @ rm.S_P
    # tiny ridge only for the starting guess; unobserved directions start at the backfill
    ridge = 1e-6 * max(1.0, float(np.max(np.diag(M))))
    x_bf = rm.S_A.T @ z
    rhs = _static_rhs(rm, z, var, sched, cfg) + ridge * x_bf
    return np.linalg.solve(M + ridge * np.eye(rm.l), rhs)


def admm_init(rm: RegionMatrices, z, var, sched, cfg: VerificationConfig, x0: np.ndarray,
              messages: dict[int, np.ndarray]) -> RegionState:
    """Set psi_0 from the neighbours' starting points and upsilon_0 halfway."""
    z = np.asarray(z, dtype=float).reshape(len(rm.meas_idx), -1)
    x0 = np.asarray(x0, dtype=float).reshape(rm.l, -1)
    T = x0.shape[1]
    sched = np.asarray(sched, dtype=float).reshape(len(rm.own_buses), T)
    var = np.broadcast_to(np.asarray(var, dtype=float), (len(rm.meas_idx),)).copy()
    psi = consensus_average(rm, messages, T)
    st = RegionState(rm=rm, z=z, var=var, sched=sched, x=x0.copy(), psi=psi,
                     ups=0.5 * (psi + x0), x_prev=x0.copy())
    st._factor = _factor(system_matrix(rm, var, cfg), cfg.guard, rm.region)
    st._rhs0 = _static_rhs(rm, z, var, sched, cfg)
    return st


def admm_x_update(state: RegionState, cfg: VerificationConfig) -> np.ndarray:
    if state._factor is None:
        state._factor = _factor(system_matrix(state.rm, state.var, cfg), cfg.guard, state.region)
        state._rhs0 = _static_rhs(state.rm, state.z, state.var, state.sched, cfg)
    rhs = state._rhs0 + cfg.c4 * state.rm.d[:, None] * state.ups
    x = cho_solve(state._factor, rhs)
    if not np.all(np.isfinite(x)):
        raise SingularSystem(f"region {state.region}: non-finite update")
    state.x_prev, state.x = state.x, x
    state.k += 1
    return x


def admm_consensus_update(state: RegionState, messages: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """psi from the neighbours' new copies, then upsilon from the previous psi and x."""
    psi_new = consensus_average(state.rm, messages, state.T)
    state.ups = state.ups + psi_new - 0.5 * (state.psi + state.x_prev)
    state.psi = psi_new
    return state.psi, state.ups


# ----------------------------------------------------------------------------
# detection

def disagreement_update(d: float, own: np.ndarray, other: np.ndarray, alpha: float) -> float:
    """Exponentially smoothed mean squared gap between two copies of a shared slice.

    ``own`` and ``other`` are (n_shared, T) arrays over the window.
    """
    own = np.atleast_2d(np.asarray(own, dtype=float).T).T
    other = np.atleast_2d(np.asarray(other, dtype=float).T).T
    n, T = own.shape
    if n == 0 or T == 0:
        return (1.0 - alpha) * d
    gap = float(np.sum((own - other) ** 2))
    return (1.0 - alpha) * d + (alpha / 4.0) * gap / (n * T)


def normalize_disagreement(d: np.ndarray, eps_B: float = 1e-16) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return d / (d.sum(axis=1, keepdims=True) + eps_B)


def trust_scores(d: np.ndarray, *, tol: float = 1e-10, max_iter: int = 1000,
                 eps_B: float = 1e-16) -> np.ndarray:
    """Left principal eigenvector of the row-normalised disagreement matrix.

    Power iteration runs on the lazy chain 0.5 (I + B^T), which has the same
    fixed point but cannot oscillate on bipartite communication graphs.
    """
    B = normalize_disagreement(d, eps_B)
    N = len(B)
    pi = np.full(N, 1.0 / N)
    for _ in range(max_iter):
        nxt = 0.5 * (pi + B.T @ pi)
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
    raise EigenNoConvergence(f"power iteration did not settle in {max_iter} steps")


@dataclass
class DetectionState:
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    d: np.ndarray = None          # (N, N), row n holds n's view of each neighbour
    B: np.ndarray = None
    pi: np.ndarray = None
    k: int = 0

    def __post_init__(self):
        N = len(self.nodes)
        if self.d is None:
            self.d = np.zeros((N, N))
        if self.B is None:
            self.B = np.zeros((N, N))
        if self.pi is None:
            self.pi = np.zeros(N)

    def pos(self, n: int) -> int:
        return self.nodes.index(n)


@dataclass(frozen=True)
class Termination:
    kind: str                     # "T1" | "T2" | "continue"
    attacker: int | None = None


def excluded_stats(pi: np.ndarray, m: int) -> tuple[float, float]:
    """Mean and spread of the other entries around that mean."""
    rest = np.delete(np.asarray(pi, dtype=float), m)
    if len(rest) == 0:
        return 0.0, 0.0
    mu = float(rest.mean())
    return mu, float(np.sqrt(np.mean((rest - mu) ** 2)))


def check_termination(x_steps, pi_prev: np.ndarray | None, pi: np.ndarray | None,
                      cfg: VerificationConfig, nodes: tuple[int, ...] | None = None, *,
                      k: int | None = None, activity: np.ndarray | None = None,
                      gap: float | None = None) -> Termination:
    """T1 when every region's last x-step is within eps and, if given, the
    largest shared-variable gap between neighbours is too; T2 when the trust
    vector has settled and one entry stands out from the rest.

    ``activity[i]`` is the current RMS gap between aggregator i's messages
    and its neighbours' own copies; T2 only flags an entry whose activity
    exceeds ``t2_floor``, and never before iteration ``t2_burn_in``.
    """
    if max(x_steps, default=np.inf) <= cfg.eps and (gap is None or gap <= cfg.eps):
        return Termination("T1")
    if pi_prev is None or pi is None:
        return Termination("continue")
    if k is not None and k < cfg.t2_burn_in:
        return Termination("continue")
    pi, pi_prev = np.asarray(pi), np.asarray(pi_prev)
    if np.max(np.abs(pi - pi_prev)) > cfg.eps_pi:
        return Termination("continue")
    flagged = []
    for i in range(len(pi)):
        mu, sd = excluded_stats(pi, i)
        if pi[i] > mu + cfg.beta * sd and (activity is None or activity[i] > cfg.t2_floor):
            flagged.append(i)
    if not flagged:
        return Termination("continue")
    i = max(flagged, key=lambda j: pi[j])
    return Termination("T2", nodes[i] if nodes is not None else i)


# ----------------------------------------------------------------------------
# message exchange

class VerificationExchange(Protocol):
    def send(self, k: int, sender: int, receiver: int, payload: np.ndarray) -> None: ...

    def receive(self, k: int, receiver: int, sender: int) -> np.ndarray | None: ...

    def publish_row(self, k: int, region: int, row: dict[int, float]) -> None: ...


class MemoryExchange:
    def __init__(self):
        self.box: dict[tuple[int, int, int], np.ndarray] = {}

    def send(self, k, sender, receiver, payload):
        self.box[(k, sender, receiver)] = np.array(payload, dtype=float)

    def receive(self, k, receiver, sender):
        return self.box.pop((k, sender, receiver), None)

    def publish_row(self, k, region, row):
        pass


# (sender, receiver, k, slice) -> slice or None to withhold
MessageHook = Callable[[int, int, int, np.ndarray], "np.ndarray | None"]


@dataclass
class PhaseTrace:
    nodes: tuple[int, ...]
    status: str
    iterations: int
    pi: list[np.ndarray]
    steps: list[float]
    ties: dict[tuple[int, int], list[np.ndarray]]
    attacker: int | None = None


@dataclass
class VerificationResult:
    status: str                               # "T1" | "max_iter" | "disconnected"
    attackers: list[int]
    active: tuple[int, ...]
    x: dict[int, np.ndarray]                  # region -> (l_n, T)
    injections: dict[int, dict[int, np.ndarray]]  # region -> bus -> (T,)
    deviations: dict[int, np.ndarray]         # bus -> (T,) schedule minus verified
    phases: list[PhaseTrace]
    matrices: dict[int, RegionMatrices]
    isolated: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)  # last estimate of dropped regions

    @property
    def iterations(self) -> int:
        return sum(p.iterations for p in self.phases)

    @property
    def outcome(self) -> str:
        return "T2" if self.attackers else self.status


def _run_phase(states: dict[int, RegionState], graph: CommunicationGraph, cfg: VerificationConfig,
               exchange: VerificationExchange, hook: MessageHook | None, trace_edges,
               k_offset: int) -> tuple[Termination, PhaseTrace]:
    nodes = tuple(sorted(states))
    det = DetectionState(nodes, tuple(sorted(graph.edges)))
    last: dict[tuple[int, int], np.ndarray] = {}
    trace = PhaseTrace(nodes, "running", 0, [], [], {e: [] for e in trace_edges})
    pi_prev = None
    term = Termination("continue")
    for k in range(1, cfg.max_iter + 1):
        kk = k_offset + k
        steps = []
        for n in nodes:
            st = states[n]
            admm_x_update(st, cfg)
            steps.append(float(np.max(np.abs(st.x - st.x_prev), initial=0.0)))
        for n in nodes:
            for m in states[n].rm.neighbors:
                msg = states[n].shared_slice(m)
                if hook is not None:
                    msg = hook(n, m, kk, msg)
                if msg is not None:
                    exchange.send(kk, n, m, msg)
        alpha = cfg.alpha_k(k)
        activity = np.zeros(len(nodes))
        gap = 0.0
        for n in nodes:
            st = states[n]
            inbox = {}
            for m in st.rm.neighbors:
                got = exchange.receive(kk, n, m)
                if got is None:
                    # neighbour withheld this round: fall back to its last message
                    got = last.get((m, n))
                    if got is None:
                        got = st.shared_slice(m)
                else:
                    last[(m, n)] = got
                inbox[m] = got
            admm_consensus_update(st, inbox)
            i = det.pos(n)
            for m, msg in inbox.items():
                j = det.pos(m)
                own = st.shared_slice(m)
                det.d[i, j] = disagreement_update(det.d[i, j], own, msg, alpha)
                if own.size:
                    activity[j] = max(activity[j], float(np.sqrt(np.mean((own - msg) ** 2))))
                    gap = max(gap, float(np.max(np.abs(own - msg))))
            exchange.publish_row(kk, n, {m: float(det.d[i, det.pos(m)]) for m in inbox})
        det.B = normalize_disagreement(det.d, cfg.eps_B)
        det.pi = trust_scores(det.d, tol=cfg.eig_tol, max_iter=cfg.eig_max_iter, eps_B=cfg.eps_B)
        det.k = k
        trace.pi.append(det.pi.copy())
        trace.steps.append(max(steps))
        for (a, b) in trace_edges:
            if a in states and b in states and b in states[a].rm.S_nm:
                trace.ties[(a, b)].append(np.stack([states[a].shared_slice(b), states[b].shared_slice(a)]))
        if k >= 2:
            term = check_termination(steps, pi_prev, det.pi, cfg, nodes, k=k, activity=activity, gap=gap)
            if term.kind != "continue":
                trace.iterations = k
                trace.status = term.kind
                trace.attacker = term.attacker
                return term, trace
        pi_prev = det.pi.copy()
    trace.iterations = cfg.max_iter
    trace.status = "max_iter"
    log.warning("verification hit the %d-iteration cap", cfg.max_iter)
    return Termination("continue"), trace


def _start(topology, plan, active, measurements, variances, schedules, cfg, H_global):
    rms = {n: build_region_matrices(topology, n, plan, active=active, H_global=H_global) for n in active}
    x0 = {n: initial_x(rms[n], measurements[n], variances[n], schedules[n], cfg) for n in active}
    states = {}
    for n in active:
        msgs = {m: rms[m].S_nm[n] @ x0[m] for m in rms[n].neighbors}
        states[n] = admm_init(rms[n], measurements[n], variances[n], schedules[n], cfg, x0[n], msgs)
    return rms, states


def run_verification(topology: GridTopology, plan: SensorPlan, measurements: dict[int, np.ndarray],
                     schedules: dict[int, np.ndarray], cfg: VerificationConfig | None = None, *,
                     variances: dict[int, np.ndarray] | None = None,
                     graph: CommunicationGraph | None = None,
                     exchange: VerificationExchange | None = None,
                     hook: MessageHook | None = None,
                     regions: tuple[int, ...] | None = None,
                     trace_edges=((0, 1),)) -> VerificationResult:
    """Fit, detect, isolate and restart until the remaining regions agree.

    ``measurements[n]`` is (m_n, T) in the region's reading order and
    ``schedules[n]`` is (n_own, T) in its own-bus order. Raises
    GraphDisconnected (with ``.partial``) when isolating an attacker splits
    the communication graph.
    """
    cfg = cfg or VerificationConfig()
    exchange = exchange or MemoryExchange()
    H_global = physics_matrix(topology)
    active = tuple(sorted(regions if regions is not None else topology.regions))
    if graph is None:
        from .grid.regions import build_communication_graph
        graph = build_communication_graph(topology, plan)
    graph = make_graph(active, {e for e in graph.edges if e[0] in active and e[1] in active}) \
        if set(graph.nodes) != set(active) else graph
    if variances is None:
        variances = {n: np.ones(len(np.asarray(measurements[n]))) for n in active}
    if len(active) < 2:
        raise InsufficientRegions("verification needs at least two regions")
    if not graph.connected():
        raise GraphDisconnected("communication graph is not connected")

    attackers: list[int] = []
    phases: list[PhaseTrace] = []
    isolated: dict[int, dict[int, np.ndarray]] = {}
    n_total = len(active)
    k_offset = 0
    while True:
        rms, states = _start(topology, plan, active, measurements, variances, schedules, cfg, H_global)
        term, trace = _run_phase(states, graph, cfg, exchange, hook, trace_edges, k_offset)
        k_offset += trace.iterations
        phases.append(trace)
        if term.kind != "T2":
            status = "T1" if term.kind == "T1" else "max_iter"
            return _result(status, attackers, active, states, rms, phases, isolated)
        bad = term.attacker
        attackers.append(bad)
        isolated[bad] = _bus_map(states[bad])
        log.info("aggregator %d isolated after %d iterations", bad, trace.iterations)
        active = tuple(n for n in active if n != bad)
        graph = graph.without(bad)
        if len(attackers) > n_total - 2 or len(active) < 2:
            raise InsufficientRegions(f"only {len(active)} region(s) left after isolation")
        if not graph.connected():
            partial = _result("disconnected", attackers, active, states, rms, phases, isolated)
            err = GraphDisconnected(f"removing aggregator {bad} splits the communication graph")
            err.partial = partial
            raise err


def _bus_map(st: RegionState) -> dict[int, np.ndarray]:
    inj = st.injections()
    return {b: inj[i] for i, b in enumerate(st.rm.own_buses)}


def _result(status, attackers, active, states, rms, phases, isolated) -> VerificationResult:
    x, inj, dev = {}, {}, {}
    for n in active:
        st = states[n]
        x[n] = st.x.copy()
        inj[n] = _bus_map(st)
        dv = st.deviation()
        for i, b in enumerate(st.rm.own_buses):
            dev[b] = dv[i]
    return VerificationResult(status=status, attackers=list(attackers), active=tuple(active), x=x,
                              injections=inj, deviations=dev, phases=phases,
                              matrices={n: rms[n] for n in active if n in rms}, isolated=isolated)


def centralized_fit(topology: GridTopology, plan: SensorPlan, measurements, schedules,
                    cfg: VerificationConfig, variances=None, regions=None) -> np.ndarray:
    """Single weighted least-squares solve of the summed regional objectives
    with consensus imposed by identifying shared variables. Returns (L, T)."""
    H_global = physics_matrix(topology)
    active = tuple(sorted(regions if regions is not None else topology.regions))
    L = H_global.shape[1]
    T = np.asarray(schedules[active[0]]).shape[1]
    M = np.zeros((L, L))
    rhs = np.zeros((L, T))
    for n in active:
        rm = build_region_matrices(topology, n, plan, active=active, H_global=H_global)
        var = np.ones(len(rm.meas_idx)) if variances is None else np.asarray(variances[n], float)
        A = rm.S_A @ rm.S
        Hn = rm.H @ rm.S
        P = rm.S_P @ rm.S
        W = 1.0 / var
        M += cfg.c1 * (A.T * W) @ A + cfg.c2 * Hn.T @ Hn + cfg.c3 * P.T @ P
        rhs += cfg.c1 * A.T @ (W[:, None] * np.asarray(measurements[n], float)) + cfg.c3 * P.T @ np.asarray(schedules[n], float)
    return np.linalg.solve(M, rhs)
