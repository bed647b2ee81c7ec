"""Solving-window lifecycle: bidding, price clearing, dispatch, metering,
lagged verification of the previous window and penalty billing."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adversary import AttackSpec, build_stealth_attack, message_hook, perturb_measurements
from .errors import AdversaryError, GraphDisconnected, InsufficientRegions, IoFailure, MarketError
from .grid.powerflow import BUS_KINDS, describe_var, physics_matrix, solve_power_flow
from .grid.regions import build_communication_graph, build_region_matrices
from .ledger import GLOBAL, LedgerNetwork, LedgerPricingExchange, LedgerVerificationExchange
from .market import PricingResult, Prosumer, RegionSolver, run_pricing
from .resources import Budget, Kind, build_asset
from .scenario import (
    ScenarioConfig,
    build_prosumers,
    build_sensor_plan,
    build_topology,
    pricing_config,
)
from .scheduler import make_scheduler
from .verification import VerificationConfig, VerificationResult, run_verification

log = logging.getLogger(__name__)


def verification_config(sc: ScenarioConfig) -> VerificationConfig:
    opts = dict(sc.verification)
    preset = opts.pop("preset", "default")
    return VerificationConfig.preset(preset, **opts)


def attack_spec(sc: ScenarioConfig) -> tuple[AttackSpec | None, tuple[int, ...] | None]:
    """The scenario's attack block; the optional ``windows`` list limits
    which executed windows it touches."""
    if not sc.attack:
        return None, None
    obj = dict(sc.attack)
    windows = obj.pop("windows", None)
    return AttackSpec.from_dict(obj), (tuple(windows) if windows is not None else None)


@dataclass
class Execution:
    window: int
    truth: np.ndarray                  # (L, T) global state
    clean: dict[int, np.ndarray]       # region -> pre-noise readings
    readings: dict[int, np.ndarray]    # region -> posted readings
    injections: np.ndarray             # (n_bus, T)


@dataclass
class WindowReport:
    index: int
    pricing: list = field(default_factory=list)        # one record per cleared window
    verified_window: int | None = None
    verification: str | None = None
    attackers: list = field(default_factory=list)
    verification_iterations: int = 0
    pi_history: list = field(default_factory=list)    # [phase, iteration, pi...]
    ties: list = field(default_factory=list)          # [phase, iteration, var, t, a, b]
    deviations: dict = field(default_factory=dict)    # bus -> per-interval deviation
    penalties: dict = field(default_factory=dict)
    wall: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


class Simulation:
    def __init__(self, sc: ScenarioConfig, *, deterministic: bool = True, workers: int | None = None,
                 journal_dir: str | Path | None = None):
        self.sc = sc
        self.topo = build_topology(sc.grid)
        self.plan = build_sensor_plan(sc, self.topo)
        self.graph = build_communication_graph(self.topo, self.plan)
        self.roster = {p.pid: p for p in build_prosumers(sc, self.topo)}
        self.entries = {str(e.get("id", f"b{e['bus']}")): e for e in sc.prosumers}
        self.budgets = {pid: Budget(pid, p.budget.r) for pid, p in self.roster.items()}
        self.pcfg = pricing_config(sc)
        self.vcfg = verification_config(sc)
        self.attack, self.attack_windows = attack_spec(sc)
        if self.attack is not None and self.attack.attacker not in self.topo.regions:
            raise AdversaryError(f"attacker {self.attack.attacker} is not an aggregator of {sc.name}")
        self.scheduler = make_scheduler(deterministic, workers)
        self.net = LedgerNetwork(self.topo.regions, journal_dir=journal_dir)
        for pid, p in self.roster.items():
            self.net.prosumer(pid, p.region, p.asset.kind.value)
            self.net.act_init(self.net.admins[p.region], pid, {"budget": p.budget.r, "bus": p.bus})
        H = physics_matrix(self.topo)
        self.rms = {n: build_region_matrices(self.topo, n, self.plan, H_global=H) for n in self.topo.regions}
        self.variances = {n: self._variances(self.rms[n].meas_idx) for n in self.topo.regions}
        self.cleared: dict[int, PricingResult] = {}
        self.executed: dict[int, Execution] = {}
        self.reports: list[WindowReport] = []
        self.penalty_rate = float(sc.penalty.get("rate", 1.0))
        self.deadband = float(sc.penalty.get("deadband_sigma", 3.0))

    # -- helpers -------------------------------------------------------------

    def _variance_of(self, kind: str) -> float:
        v = self.sc.noise.get("variance", 1.0)
        return float(v.get(kind, 1.0) if isinstance(v, dict) else v)

    def _variances(self, meas_idx) -> np.ndarray:
        kinds = [describe_var(self.topo, int(j))[0] for j in meas_idx]
        return np.array([max(self._variance_of(k), 1e-12) for k in kinds])

    def _rng(self, window: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.sc.seed, window, stream])

    def _attack_on(self, window: int) -> AttackSpec | None:
        if self.attack is None:
            return None
        if self.attack_windows is not None and window not in self.attack_windows:
            return None
        return self.attack

    # -- stages ---------------------------------------------------------------

    def bidding(self, window: int) -> dict[int, list[Prosumer]]:
        self.net.open_bidding(window)
        for pid in sorted(self.roster):
            e = self.entries[pid]
            self.net.bc_submit_bid(pid, window, {"kind": e["kind"], "params": e.get("params", {})})
        self.net.close_bidding()
        out: dict[int, list[Prosumer]] = {n: [] for n in self.topo.regions}
        for n in self.topo.regions:
            for pid, bid in sorted(self.net.bids(n, window).items()):
                base = self.roster[pid]
                asset = build_asset(Kind(bid["kind"]), bid["params"], self.sc.T)
                r = self.budgets[pid].r
                if r < 0 and asset.budgeted:
                    log.info("prosumer %s has a negative budget; buying is disabled this window", pid)
                out[n].append(Prosumer(pid, base.bus, n, asset, Budget(pid, max(r, 0.0))))
        return out

    def clear(self, window: int, groups: dict[int, list[Prosumer]]) -> PricingResult:
        solvers = {n: RegionSolver(n, ps, self.sc.T, self.pcfg.smoothing) for n, ps in groups.items()}
        prev = self.cleared.get(window - 1)
        silent = ()
        spec = self._attack_on(window)
        if spec is not None and spec.mode == "silent":
            silent = (spec.attacker,)
        try:
            res = run_pricing(solvers, self.pcfg, lam0=prev.lam if prev is not None else None,
                              exchange=LedgerPricingExchange(self.net, window, silent),
                              prior=prev.schedules if prev is not None else None,
                              run_stage=self.scheduler, budgets=self.budgets)
        except MarketError as exc:
            if prev is None:
                raise
            log.warning("pricing for window %d failed (%s); recycling window %d", window, exc, window - 1)
            res = PricingResult(prev.lam, [prev.lam], prev.schedules, 0, prev.balance, "recycled")
        self.cleared[window] = res
        for n, s in res.schedules.items():
            for pid, row in zip(s.pids, s.P):
                self.net.bc_post_dispatch(n, window, pid, row, self.budgets[pid].r)
        for n in self.topo.regions:
            self.net.act_post_schedule(self.net.admins[n], window, n,
                                       {str(b): v for b, v in self._bus_schedule(res, n).items()})
        return res

    def _bus_schedule(self, res: PricingResult, region: int) -> dict[int, list]:
        disp = res.dispatch
        out = {b: np.zeros(self.sc.T) for b in self.topo.buses_of(region)}
        for pid, row in disp.items():
            p = self.roster[pid]
            if p.region == region:
                out[p.bus] = out[p.bus] + row
        return {b: v.tolist() for b, v in out.items()}

    def execute(self, window: int) -> Execution:
        res = self.cleared[window]
        T = self.sc.T
        pos = self.topo.bus_pos
        p = np.zeros((self.topo.n_bus, T))
        dev_std = float(self.sc.noise.get("compliance_std", 0.0))
        rng_dev = self._rng(window, 2)
        for pid, row in sorted(res.dispatch.items()):
            pr = self.roster[pid]
            jitter = rng_dev.normal(0.0, dev_std, T) if dev_std > 0 and pr.asset.kind != Kind.SLACK else 0.0
            p[pos[pr.bus]] += row + jitter
        tan_phi = math.tan(math.acos(self.sc.power_factor))
        state = solve_power_flow(self.topo, p, p * tan_phi)
        X = state.vector()
        rng = self._rng(window, 1)
        spec = self._attack_on(window)
        clean, readings = {}, {}
        for n in self.topo.regions:
            rm = self.rms[n]
            clean[n] = X[rm.meas_idx].copy()
            z = clean[n] + np.sqrt(self.variances[n])[:, None] * rng.standard_normal(clean[n].shape)
            if spec is not None and spec.attacker == n:
                z = self._falsify(z, rm, spec)
            readings[n] = z
            self.net.mc_submit_measurements(self.net.admins[n], window, z)
        ex = Execution(window, X, clean, readings, p)
        self.executed[window] = ex
        return ex

    def _falsify(self, z, rm, spec: AttackSpec):
        if spec.mode == "measurement":
            return perturb_measurements(z, rm.meas_idx, spec)
        if spec.mode == "stealth":
            a = build_stealth_attack(rm)
            if a is None:
                log.info("no stealth direction available to aggregator %d", spec.attacker)
                return z
            return z + spec.scale * a[:, None]
        return z

    def verify(self, window: int) -> tuple[VerificationResult | None, str]:
        meas, sched = {}, {}
        for n in self.topo.regions:
            meas[n] = np.asarray(self.net.measurements(n, window), dtype=float)
            rec = self.net.query(self.net.admins[n], GLOBAL, f"schedule/{window}/{n}")
            sched[n] = np.array([rec["buses"][str(b)] for b in self.rms[n].own_buses])
        spec = self._attack_on(window)
        hook = message_hook(spec, self.graph)
        try:
            res = run_verification(self.topo, self.plan, meas, sched, self.vcfg,
                                   variances=self.variances, graph=self.graph,
                                   exchange=LedgerVerificationExchange(self.net, window), hook=hook)
            return res, res.outcome
        except GraphDisconnected as exc:
            log.warning("window %d: %s", window, exc)
            return exc.partial, "T2"
        except InsufficientRegions as exc:
            log.warning("window %d: %s", window, exc)
            return None, "insufficient"

    def penalize(self, window: int, res: VerificationResult) -> tuple[dict[int, np.ndarray], dict[str, float]]:
        """Charge prosumers for verified deviations beyond the noise deadband.

        Buses of an isolated aggregator are billed on the gap between the
        schedule and that aggregator's last estimate, with no deadband.
        """
        sigma = math.sqrt(self._variance_of("p"))
        band = self.deadband * sigma
        cleared = self.cleared[window]
        devs: dict[int, np.ndarray] = dict(res.deviations)
        trusted = set(devs)
        for n, inj in res.isolated.items():
            sched = self._bus_schedule(cleared, n)
            for b, est in inj.items():
                devs[b] = np.asarray(sched[b]) - est
        penalties: dict[str, float] = {}
        for pid, pr in sorted(self.roster.items()):
            if pr.asset.kind == Kind.SLACK or pr.bus not in devs:
                continue
            d = np.abs(devs[pr.bus])
            billable = d[d > band] if pr.bus in trusted else d
            pen = self.penalty_rate * float(billable.sum())
            if pen > 0:
                self.budgets[pid].r -= pen
                penalties[pid] = pen
        return devs, penalties

    # -- windows --------------------------------------------------------------

    def run_window(self, i: int) -> WindowReport:
        t0 = time.perf_counter()
        rep = WindowReport(index=i)
        if i == 0 and 0 not in self.cleared:
            self._record_pricing(rep, 0, self.clear(0, self.bidding(0)))
        self.execute(i)
        if i >= 1 and (i - 1) in self.executed:
            res, outcome = self.verify(i - 1)
            rep.verified_window = i - 1
            rep.verification = outcome
            if res is not None:
                devs, pens = self.penalize(i - 1, res)
                rep.attackers = list(res.attackers)
                rep.verification_iterations = res.iterations
                rep.deviations = {str(b): np.asarray(v).tolist() for b, v in sorted(devs.items())}
                rep.penalties = pens
                for ph_i, ph in enumerate(res.phases):
                    for k, pi in enumerate(ph.pi, start=1):
                        rep.pi_history.append([ph_i, k] + [float(pi[ph.nodes.index(n)]) if n in ph.nodes else 0.0
                                                           for n in self.topo.regions])
                    for (a, b), series in ph.ties.items():
                        names = self.rms[a].shared_idx.get(b, np.array([], int))
                        for k, arr in enumerate(series, start=1):
                            for j, g in enumerate(names):
                                kind, el = describe_var(self.topo, int(g))
                                rep.ties.append([ph_i, k, f"{kind}{int(el)}", float(arr[0][j, 0]),
                                                 float(arr[1][j, 0])])
        if i + 1 < self.sc.windows:
            self._record_pricing(rep, i + 1, self.clear(i + 1, self.bidding(i + 1)))
        rep.wall = time.perf_counter() - t0
        self.reports.append(rep)
        return rep

    def _record_pricing(self, rep: WindowReport, window: int, res: PricingResult):
        totals: dict[str, np.ndarray] = {}
        for pid, row in res.dispatch.items():
            k = self.roster[pid].asset.kind.value
            totals[k] = totals.get(k, np.zeros(self.sc.T)) + row
        rep.pricing.append({
            "window": window, "status": res.status, "iterations": res.iterations,
            "lam": res.lam.tolist(), "lam_trace": [np.asarray(l).tolist() for l in res.trace],
            "balance": np.asarray(res.balance).tolist(),
            "dispatch": {pid: row.tolist() for pid, row in sorted(res.dispatch.items())},
            "billing": dict(res.billing),
            "transfers": {k: v.tolist() for k, v in sorted(totals.items())},
        })

    def run(self, windows: int | None = None) -> list[WindowReport]:
        n = windows or self.sc.windows
        try:
            for i in range(n):
                self.run_window(i)
        finally:
            self.scheduler.close()
        return self.reports


def money_summary(reports: list[WindowReport]) -> dict:
    """Settlement totals. The operator balance is computed from prices and
    the aggregate dispatch, independently of the per-prosumer billing."""
    receipts = payments = penalties = operator = 0.0
    for r in reports:
        for rec in r.pricing:
            for v in rec["billing"].values():
                if v > 0:
                    receipts += v
                else:
                    payments -= v
            net = np.sum([np.asarray(p) for p in rec["dispatch"].values()], axis=0)
            if rec["billing"]:
                operator -= float(np.asarray(rec["lam"]) @ net)
        penalties += sum(r.penalties.values())
        operator += sum(r.penalties.values())
    return {"producer_receipts": receipts, "consumer_payments": payments, "penalties": penalties,
            "operator_balance": operator,
            "identity_gap": abs(payments + penalties - receipts - operator)}


def emit_metrics(reports: list[WindowReport], out: str | Path, extra: dict | None = None) -> dict:
    if not reports:
        raise IoFailure("no window reports to write")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "lambda.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "iteration", "t", "lambda"])
            for rec in (rec for r in reports for rec in r.pricing):
                for k, lam in enumerate(rec["lam_trace"]):
                    for t, v in enumerate(lam):
                        w.writerow([rec["window"], k, t, repr(float(v))])
        with (out / "transfers.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "kind", "t", "power_mw"])
            for rec in (rec for r in reports for rec in r.pricing):
                for kind, vals in rec["transfers"].items():
                    for t, v in enumerate(vals):
                        w.writerow([rec["window"], kind, t, repr(float(v))])
        with (out / "ties.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "phase", "iteration", "variable", "region_a", "region_b"])
            for r in reports:
                for row in r.ties:
                    w.writerow([r.verified_window] + row)
        with (out / "pi.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            n = max((len(row) - 2 for r in reports for row in r.pi_history), default=0)
            w.writerow(["window", "phase", "iteration"] + [f"pi_{j}" for j in range(n)])
            for r in reports:
                for row in r.pi_history:
                    w.writerow([r.verified_window] + row)
        with (out / "deviations.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "bus", "t", "deviation_mw"])
            for r in reports:
                for bus, vals in r.deviations.items():
                    for t, v in enumerate(vals):
                        w.writerow([r.verified_window, bus, t, repr(float(v))])
        summary = {
            "windows": [{
                "index": r.index,
                "pricing": [{"window": rec["window"], "status": rec["status"],
                             "iterations": rec["iterations"], "lam": rec["lam"],
                             "balance_inf": max((abs(b) for b in rec["balance"]), default=0.0)}
                            for rec in r.pricing],
                "verified_window": r.verified_window, "verification": r.verification,
                "verification_iterations": r.verification_iterations, "attackers": r.attackers,
                "penalties": sum(r.penalties.values()), "wall_s": r.wall} for r in reports],
            "money": money_summary(reports),
            **(extra or {}),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    except OSError as exc:
        raise IoFailure(f"cannot write metrics to {out}: {exc}") from exc
    return summary
