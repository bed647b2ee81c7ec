"""Distributed pricing by dual decomposition across aggregators.

``lam`` is the energy price per interval. Each aggregator schedules its
prosumers against the current price, and the price then moves against
the aggregate imbalance until supply meets demand.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import MissingAggregator, NoPriorSolution, SolverStall
from .qp import solve_qp_batch
from .resources import AssetModel, Budget

log = logging.getLogger(__name__)


@dataclass
class PriceVector:
    lam: np.ndarray
    k: int = 0


@dataclass
class Prosumer:
    pid: str
    bus: int
    region: int
    asset: AssetModel
    budget: Budget


@dataclass
class ScheduleMatrix:
    region: int
    pids: tuple[str, ...]
    P: np.ndarray  # (n_prosumers, T)

    @property
    def aggregate(self) -> np.ndarray:
        return self.P.T @ np.ones(len(self.pids)) if len(self.pids) else np.zeros(self.P.shape[1])

    def row(self, pid: str) -> np.ndarray:
        return self.P[self.pids.index(pid)]


@dataclass
class PricingConfig:
    alpha_hat: float = 0.05
    k_max: int = 500
    timeout: float = 30.0
    eps: float = 1e-4
    balance_tol: float = 1e-3
    cycle_window: int = 10
    # quadratic smoothing on flexible profiles; keeps LP-type responses
    # single-valued so the balance can close at the clearing price
    smoothing: float = 0.0

    def __post_init__(self):
        for name in ("alpha_hat", "k_max", "timeout", "eps", "balance_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PricingConfig.{name} must be positive")


def step_size(alpha_hat: float, k: int) -> float:
    return alpha_hat / (k + 1)


def price_update(lam: np.ndarray, aggregates: dict[int, np.ndarray], alpha: float,
                 regions: tuple[int, ...] | None = None) -> np.ndarray:
    """Move the price against the net injection: surplus lowers it."""
    if regions is not None:
        missing = [n for n in regions if n not in aggregates]
        if missing:
            raise MissingAggregator(f"no aggregate from aggregator(s) {missing}")
    total = np.zeros_like(lam, dtype=float)
    for n in sorted(aggregates):
        total = total + aggregates[n]
    return lam - alpha * total


def check_convergence(lam_next: np.ndarray, lam: np.ndarray, eps: float) -> bool:
    return bool(np.max(np.abs(np.asarray(lam_next) - np.asarray(lam)), initial=0.0) < eps)


def billing_update(budgets: dict[str, Budget], schedules, lam: np.ndarray) -> dict[str, float]:
    """Credit each prosumer with the value of its net injection; returns the deltas."""
    deltas: dict[str, float] = {}
    for sched in _as_list(schedules):
        for pid, row in zip(sched.pids, sched.P):
            delta = float(row @ lam)
            budgets[pid].r += delta
            deltas[pid] = delta
    return deltas


def _as_list(schedules):
    if isinstance(schedules, dict):
        return [schedules[k] for k in sorted(schedules)]
    if isinstance(schedules, ScheduleMatrix):
        return [schedules]
    return list(schedules)


# ----------------------------------------------------------------------------
# per-prosumer convex program in the control variables

@dataclass
class _Program:
    pid: str
    asset: AssetModel
    G: np.ndarray
    g0: np.ndarray
    E: np.ndarray
    e: np.ndarray
    F: np.ndarray
    f: np.ndarray
    budget_row: int | None   # index of the budget row in F, if any

    @property
    def signature(self):
        return (len(self.g0), len(self.e), len(self.f))


def _compile(pid: str, asset: AssetModel, budget: float | None, smoothing: float = 0.0) -> _Program:
    T = asset.T
    A, ell = asset.A_T, asset.ell_T
    c = asset.cost
    anchor = np.zeros(T) if c.anchor is None else c.anchor
    pwl = [t for t in range(T) if c.c1_pos[t] or c.c1_neg[t]]
    ns = 1 if c.deadline_credit else 0
    n = T + len(pwl) + ns
    G = np.zeros((n, n))
    C2 = c.C2 + smoothing * np.eye(T) if asset.budgeted else c.C2
    G[:T, :T] = 2.0 * A.T @ C2 @ A
    g0 = np.zeros(n)
    g0[:T] = A.T @ (2.0 * C2 @ ell + c.c1)
    g0[T:T + len(pwl)] = 1.0
    if ns:
        g0[-1] = c.deadline_credit
    E_rows, e_vals, F_rows, f_vals = [], [], [], []

    def box(M, off, lo, hi):
        for t in range(T):
            row = np.zeros(n)
            row[:T] = M[t]
            if math.isfinite(lo[t]) and math.isfinite(hi[t]) and abs(hi[t] - lo[t]) < 1e-12:
                E_rows.append(row)
                e_vals.append(lo[t] - off[t])
                continue
            if math.isfinite(hi[t]):
                F_rows.append(row)
                f_vals.append(hi[t] - off[t])
            if math.isfinite(lo[t]):
                F_rows.append(-row)
                f_vals.append(off[t] - lo[t])

    box(np.eye(T), np.zeros(T), asset.u_lo, asset.u_hi)
    box(A, ell, asset.p_lo, asset.p_hi)
    for row_u, val in zip(asset.Eu, asset.eu):
        row = np.zeros(n)
        row[:T] = row_u
        E_rows.append(row)
        e_vals.append(val)
    for j, t in enumerate(pwl):
        w = T + j
        for sign, coef in ((1.0, c.c1_pos[t]), (-1.0, c.c1_neg[t])):
            row = np.zeros(n)
            row[:T] = sign * coef * A[t]
            row[w] = -1.0
            F_rows.append(row)
            f_vals.append(sign * coef * (anchor[t] - ell[t]))
    if ns:
        row = np.zeros(n)
        row[:T] = -np.ones(T) @ A
        row[-1] = -1.0
        F_rows.append(row)
        f_vals.append(c.deadline_need + ell.sum())
        row = np.zeros(n)
        row[-1] = -1.0
        F_rows.append(row)
        f_vals.append(c.deadline_cap)
    budget_row = None
    if budget is not None and asset.budgeted:
        budget_row = len(F_rows)
        F_rows.append(np.zeros(n))   # filled per price
        f_vals.append(budget)
    E = np.array(E_rows).reshape(-1, n)
    F = np.array(F_rows).reshape(-1, n)
    return _Program(pid, asset, G, g0, E, np.array(e_vals, float), F, np.array(f_vals, float), budget_row)


class RegionSolver:
    """Schedules one aggregator's prosumers against a price vector."""

    def __init__(self, region: int, prosumers: list[Prosumer], T: int, smoothing: float = 0.0):
        self.region = region
        self.smoothing = smoothing
        self.T = T
        self.prosumers = sorted(prosumers, key=lambda p: p.pid)
        self.pids = tuple(p.pid for p in self.prosumers)
        self.fixed: dict[str, np.ndarray] = {}
        self.programs: list[_Program] = []
        self.last_stationarity: dict[str, float] = {}
        self.refresh()

    def refresh(self):
        """Rebuild programs after budgets change."""
        self.fixed.clear()
        self.programs = []
        for pr in self.prosumers:
            if pr.asset.fixed:
                self.fixed[pr.pid] = pr.asset.ell_T.copy()
            else:
                self.programs.append(_compile(pr.pid, pr.asset, pr.budget.r, self.smoothing))
        groups: dict[tuple, list[_Program]] = {}
        for prog in self.programs:
            groups.setdefault(prog.signature, []).append(prog)
        self.groups = [groups[k] for k in sorted(groups)]

    def solve(self, lam: np.ndarray) -> ScheduleMatrix:
        lam = np.asarray(lam, dtype=float)
        rows: dict[str, np.ndarray] = dict(self.fixed)
        for group in self.groups:
            T = self.T
            G = np.stack([p.G for p in group])
            g = np.stack([p.g0 for p in group])
            g[:, :T] -= np.stack([p.asset.A_T.T @ lam for p in group])
            F = np.stack([p.F for p in group])
            f = np.stack([p.f for p in group])
            for i, p in enumerate(group):
                if p.budget_row is not None:
                    F[i, p.budget_row, :T] = -(p.asset.A_T.T @ lam)
                    f[i, p.budget_row] = p.f[p.budget_row] + lam @ p.asset.ell_T
            E = np.stack([p.E for p in group])
            e = np.stack([p.e for p in group])
            res = solve_qp_batch(G, g, E, e, F, f)
            for i, p in enumerate(group):
                rows[p.pid] = p.asset.profile(res.y[i, :T])
                self.last_stationarity[p.pid] = float(res.stationarity[i])
        P = np.array([rows[pid] for pid in self.pids]).reshape(len(self.pids), self.T)
        return ScheduleMatrix(self.region, self.pids, P)


def solve_subproblem(prosumers: list[Prosumer], lam, region: int | None = None) -> ScheduleMatrix:
    lam_vec = lam.lam if isinstance(lam, PriceVector) else np.asarray(lam, float)
    if region is None:
        region = prosumers[0].region if prosumers else -1
    return RegionSolver(region, prosumers, len(lam_vec)).solve(lam_vec)


# ----------------------------------------------------------------------------
# the iterative clearing loop

class PricingExchange(Protocol):
    def post(self, region: int, k: int, aggregate: np.ndarray) -> None: ...

    def collect(self, k: int, regions: tuple[int, ...]) -> dict[int, np.ndarray]: ...


class MemoryExchange:
    """Round-indexed in-memory bulletin board for aggregate exchange."""

    def __init__(self, silent: set[int] | None = None):
        self.rounds: dict[int, dict[int, np.ndarray]] = {}
        self.silent = set(silent or ())

    def post(self, region, k, aggregate):
        if region in self.silent:
            return
        self.rounds.setdefault(k, {})[region] = np.array(aggregate, copy=True)

    def collect(self, k, regions):
        return dict(self.rounds.get(k, {}))


@dataclass
class PricingResult:
    lam: np.ndarray
    trace: list[np.ndarray]
    schedules: dict[int, ScheduleMatrix]
    iterations: int
    balance: np.ndarray
    status: str
    billing: dict[str, float] = field(default_factory=dict)
    wall: float = 0.0
    alpha_hat: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def dispatch(self) -> dict[str, np.ndarray]:
        return {pid: row for s in self.schedules.values() for pid, row in zip(s.pids, s.P)}


def run_pricing(solvers: dict[int, RegionSolver], config: PricingConfig | None = None, *,
                lam0: np.ndarray | None = None, exchange: PricingExchange | None = None,
                prior: dict[int, ScheduleMatrix] | None = None,
                run_stage: Callable | None = None,
                budgets: dict[str, Budget] | None = None) -> PricingResult:
    """Iterate schedule / price rounds until the price settles with balance.

    ``run_stage(fn, regions)`` evaluates ``fn`` for each region and returns the
    results in region order; it lets callers plug in a concurrent scheduler.
    ``budgets`` is updated in place with the billing for the cleared window.
    """
    config = config or PricingConfig()
    exchange = exchange or MemoryExchange()
    run_stage = run_stage or (lambda fn, regs: [fn(r) for r in regs])
    regions = tuple(sorted(solvers))
    T = next(iter(solvers.values())).T
    lam = np.zeros(T) if lam0 is None else np.asarray(lam0, float).copy()
    alpha_hat = config.alpha_hat
    trace = [lam.copy()]
    history: list[np.ndarray] = []
    last: dict[int, ScheduleMatrix] | None = None
    start = time.perf_counter()
    status = "max_iter"
    k_step = 0
    k = 0
    for k in range(config.k_max):
        scheds = run_stage(lambda n: solvers[n].solve(lam), regions)
        sched_map = dict(zip(regions, scheds))
        for n in regions:
            exchange.post(n, k, sched_map[n].aggregate)
        got = exchange.collect(k, regions)
        elapsed = time.perf_counter() - start
        try:
            lam_next = price_update(lam, got, step_size(alpha_hat, k_step), regions)
        except MissingAggregator as exc:
            log.warning("pricing round %d: %s; recycling last solution", k, exc)
            status = "timeout"
            break
        last = sched_map
        total = sum((got[n] for n in regions), np.zeros(T))
        balanced = float(np.max(np.abs(total))) < config.balance_tol
        if balanced and check_convergence(lam_next, lam, config.eps):
            status = "converged"
            break
        if elapsed > config.timeout:
            log.warning("pricing exceeded %.1fs after %d rounds", config.timeout, k + 1)
            status = "timeout"
            break
        # a revisit of a recent price without balance means the step is too long
        if any(np.max(np.abs(lam_next - h)) < config.eps for h in history[-config.cycle_window:-1]):
            alpha_hat /= 2.0
            log.info("price cycle detected at round %d; step scale halved to %g", k, alpha_hat)
        history.append(lam_next.copy())
        lam = lam_next
        k_step += 1
        trace.append(lam.copy())
    wall = time.perf_counter() - start

    if status == "timeout" and last is None:
        try:
            last = recycle(prior)
            status = "recycled"
        except NoPriorSolution as exc:
            log.warning("%s; dispatch is empty", exc)
            return PricingResult(lam, trace, {}, k + 1, np.zeros(T), "no_solution", wall=wall,
                                 alpha_hat=alpha_hat)
    schedules = last if last is not None else {}
    balance = sum((s.aggregate for s in schedules.values()), np.zeros(T))
    res = PricingResult(lam, trace, schedules, k + 1, balance, status, wall=wall, alpha_hat=alpha_hat)
    if budgets is not None and schedules:
        res.billing = billing_update(budgets, schedules, lam)
    return res


def recycle(prior: dict[int, ScheduleMatrix] | None) -> dict[int, ScheduleMatrix]:
    if not prior:
        raise NoPriorSolution("no earlier dispatch to fall back on")
    return prior


def check_stationarity(solvers: dict[int, RegionSolver], tol: float = 1e-6) -> None:
    worst = max((v for s in solvers.values() for v in s.last_stationarity.values()), default=0.0)
    if worst > tol:
        raise SolverStall(f"subproblem stationarity {worst:.2e} above {tol:.0e}")
