"""Prosumer asset models: feasible sets ``p = A u + l`` and convex costs.

Injections ``p`` are positive when the asset supplies power. Only the first
``T`` rows of ``A`` and ``l`` fall inside the market horizon; deferrable
appliances carry extra rows for the tail of a late cycle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidParams

INF = math.inf


class Kind(str, enum.Enum):
    EV = "EV"
    DA = "DeferrableAppliance"
    TCL = "TCL"
    STORAGE = "Storage"
    RENEWABLE = "Renewable"
    SLACK = "Slack"
    INFLEXIBLE = "InflexibleLoad"


# kinds whose schedule responds to price and which are bound by a budget
FLEXIBLE = {Kind.EV, Kind.DA, Kind.TCL, Kind.STORAGE}


@dataclass
class CostSpec:
    """``C(p) = c0 + c1'p + p'C2 p + (p-a)_+'c1p + (a-p)_+'c1n - cd min(need + 1'p, cap)``."""

    C2: np.ndarray
    c1: np.ndarray
    c1_pos: np.ndarray
    c1_neg: np.ndarray
    c0: float = 0.0
    anchor: np.ndarray | None = None
    deadline_credit: float = 0.0
    deadline_need: float = 0.0
    deadline_cap: float = 0.0

    @classmethod
    def zero(cls, T: int) -> CostSpec:
        return cls(np.zeros((T, T)), np.zeros(T), np.zeros(T), np.zeros(T))

    @property
    def has_pwl(self) -> bool:
        return bool(np.any(self.c1_pos) or np.any(self.c1_neg))


@dataclass
class AssetModel:
    kind: Kind
    T: int
    A: np.ndarray               # (T+d, T)
    ell: np.ndarray             # (T+d,)
    u_lo: np.ndarray
    u_hi: np.ndarray
    p_lo: np.ndarray            # (T,)
    p_hi: np.ndarray
    cost: CostSpec
    Eu: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # equalities on u
    eu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    params: dict = field(default_factory=dict)

    @property
    def fixed(self) -> bool:
        return self.kind in (Kind.RENEWABLE, Kind.INFLEXIBLE)

    @property
    def budgeted(self) -> bool:
        return self.kind in FLEXIBLE

    @property
    def A_T(self) -> np.ndarray:
        return self.A[: self.T]

    @property
    def ell_T(self) -> np.ndarray:
        return self.ell[: self.T]

    def profile(self, u: np.ndarray) -> np.ndarray:
        return self.A_T @ u + self.ell_T


@dataclass
class Budget:
    owner: str
    r: float

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise InvalidParams(f"budget of {self.owner} must be finite")


def shift(T: int) -> np.ndarray:
    """Lower shift ``J``: ``(J u)[t] = u[t-1]``."""
    return np.eye(T, k=-1)


def _vec(v, T, name) -> np.ndarray:
    a = np.broadcast_to(np.asarray(v, dtype=float), (T,)).copy() if np.ndim(v) == 0 else np.asarray(v, float)
    if a.shape != (T,):
        raise InvalidParams(f"{name} must have length {T}, got {a.shape}")
    return a


def _need(params: dict, key: str):
    if key not in params:
        raise InvalidParams(f"missing parameter {key!r}")
    return params[key]


def build_asset(kind: Kind | str, params: dict, T: int) -> AssetModel:
    kind = Kind(kind)
    if T < 1:
        raise InvalidParams("horizon must be at least one interval")
    builder = {
        Kind.EV: _ev, Kind.DA: _da, Kind.TCL: _tcl, Kind.STORAGE: _storage,
        Kind.RENEWABLE: _renewable, Kind.SLACK: _slack, Kind.INFLEXIBLE: _inflexible,
    }[kind]
    asset = builder(dict(params), T)
    asset.params = dict(params)
    return asset


def _ev(p: dict, T: int) -> AssetModel:
    rho = float(_need(p, "rho"))
    cap = float(_need(p, "capacity"))
    u0 = float(p.get("u_init", 0.0))
    t_a = int(p.get("t_a", 0))
    t_d = int(_need(p, "t_d"))
    if rho <= 0 or cap <= 0:
        raise InvalidParams("EV rate and capacity must be positive")
    if not 0 <= t_a <= T - 1:
        raise InvalidParams(f"EV arrival {t_a} outside horizon")
    if t_d <= t_a:
        raise InvalidParams(f"EV deadline {t_d} not after arrival {t_a}")
    if not 0 <= u0 <= cap:
        raise InvalidParams("EV initial charge outside [0, capacity]")
    A = shift(T) - np.eye(T)
    ell = np.zeros(T)
    ell[0] = u0
    t = np.arange(T)
    plugged = (t >= t_a) & (t < t_d)
    p_lo = np.where(plugged, -rho, 0.0)
    p_hi = np.zeros(T)
    Eu = np.zeros((0, T))
    eu = np.zeros(0)
    if t_d <= T:
        Eu = np.zeros((1, T))
        Eu[0, t_d - 1] = 1.0
        eu = np.array([cap])
    c1 = _vec(p.get("c1", 0.0), T, "c1")
    cost = CostSpec.zero(T)
    cost.c1 = c1
    cost.deadline_credit = float(p.get("c_d", 0.0))
    cost.deadline_need = cap - u0
    cost.deadline_cap = rho * max(0, t_d - T)
    if cost.deadline_credit < 0:
        raise InvalidParams("deadline credit must be non-negative")
    return AssetModel(Kind.EV, T, A, ell, np.zeros(T), np.full(T, cap), p_lo, p_hi, cost, Eu, eu)


def _storage(p: dict, T: int) -> AssetModel:
    rho = float(_need(p, "rho"))
    cap = float(_need(p, "capacity"))
    u0 = float(p.get("u_init", 0.0))
    if rho <= 0 or cap <= 0:
        raise InvalidParams("storage rate and capacity must be positive")
    if not 0 <= u0 <= cap:
        raise InvalidParams("storage initial charge outside [0, capacity]")
    # discharging (u falling) injects power
    A = shift(T) - np.eye(T)
    ell = np.zeros(T)
    ell[0] = u0
    cost = CostSpec.zero(T)
    cost.c1_pos = _vec(p.get("c1_pos", 0.0), T, "c1_pos")
    cost.c1_neg = _vec(p.get("c1_neg", 0.0), T, "c1_neg")
    if np.any(cost.c1_pos < 0) or np.any(cost.c1_neg < 0):
        raise InvalidParams("storage cost vectors must be non-negative")
    return AssetModel(Kind.STORAGE, T, A, ell, np.zeros(T), np.full(T, cap),
                      np.full(T, -rho), np.full(T, rho), cost)


def _tcl(p: dict, T: int) -> AssetModel:
    R = float(_need(p, "R"))
    C = float(_need(p, "C"))
    eta = float(_need(p, "eta"))
    rho = float(_need(p, "rho"))
    if R <= 0 or C <= 0 or rho <= 0:
        raise InvalidParams("TCL R, C and rho must be positive")
    if eta == 0:
        raise InvalidParams("TCL efficiency must be non-zero")
    tau = R * C
    theta_r = _vec(_need(p, "theta_r"), T, "theta_r")
    theta_o = _vec(_need(p, "theta_o"), T, "theta_o")
    eps = _vec(p.get("eps", 0.0), T, "eps")
    u0 = float(p.get("u_init", 0.0))
    u_lo = _vec(p.get("u_lo", -1.0), T, "u_lo")
    u_hi = _vec(p.get("u_hi", 1.0), T, "u_hi")
    if np.any(u_lo > u_hi):
        raise InvalidParams("TCL comfort band is empty")
    A = (tau + 1.0) * np.eye(T) - tau * shift(T)
    ell_tilde = (theta_r - theta_o) / (R * eta) + eps / (R * eta)
    ell = ell_tilde.copy()
    ell[0] -= tau * u0
    # discomfort c2 |u|^2 written in p-space: u = A^-1 (p - l)
    c2 = float(p.get("c2", 1.0))
    if c2 < 0:
        raise InvalidParams("TCL discomfort weight must be non-negative")
    Ainv = np.linalg.inv(A)
    M = Ainv.T @ Ainv
    cost = CostSpec.zero(T)
    cost.C2 = c2 * M
    cost.c1 = -2.0 * c2 * M @ ell
    cost.c0 = c2 * float(ell @ M @ ell) - float(p.get("c0", 0.0))
    return AssetModel(Kind.TCL, T, A, ell, u_lo, u_hi, np.full(T, -rho), np.zeros(T), cost)


def _da(p: dict, T: int) -> AssetModel:
    h = np.asarray(_need(p, "h"), dtype=float)
    tau_s = int(p.get("tau_s", T - len(h)))
    if h.ndim != 1 or len(h) == 0:
        raise InvalidParams("appliance cycle profile must be a non-empty vector")
    if h[0] <= 0 or np.any(h < 0):
        raise InvalidParams("appliance cycle must start with positive consumption")
    if not 0 <= tau_s <= T - 1:
        raise InvalidParams(f"appliance slack {tau_s} outside horizon")
    L = len(h)
    A = np.zeros((T + L - 1, T))
    for s in range(T):
        A[s:s + L, s] = -h
    u_hi = np.where(np.arange(T) <= tau_s, 1.0, 0.0)
    # earlier starts are worth more to the owner
    c1_tilde = float(p.get("c1", 1.0))
    if c1_tilde < 0:
        raise InvalidParams("appliance delay price must be non-negative")
    util = c1_tilde * (T - 1 - np.arange(T))
    cost = CostSpec.zero(T)
    cost.c1 = -np.linalg.solve(A[:T].T, util)
    cost.c0 = -float(p.get("c0", 0.0))
    return AssetModel(Kind.DA, T, A, np.zeros(T + L - 1), np.zeros(T), u_hi,
                      np.full(T, -float(h.max())), np.zeros(T), cost,
                      Eu=np.ones((1, T)), eu=np.array([1.0]))


def _renewable(p: dict, T: int) -> AssetModel:
    f = _vec(_need(p, "forecast"), T, "forecast")
    if np.any(f < 0):
        raise InvalidParams("renewable forecast must be non-negative")
    return AssetModel(Kind.RENEWABLE, T, np.zeros((T, T)), f, np.zeros(T), np.zeros(T),
                      f.copy(), f.copy(), CostSpec.zero(T))


def _inflexible(p: dict, T: int) -> AssetModel:
    load = _vec(_need(p, "load"), T, "load")
    return AssetModel(Kind.INFLEXIBLE, T, np.zeros((T, T)), -load, np.zeros(T), np.zeros(T),
                      -load, -load, CostSpec.zero(T))


def _slack(p: dict, T: int) -> AssetModel:
    p_s = _vec(p.get("p_s", 0.0), T, "p_s")
    c2 = float(p.get("c2", 1.0))
    if c2 < 0:
        raise InvalidParams("slack quadratic weight must be non-negative")
    cost = CostSpec.zero(T)
    cost.C2 = c2 * np.eye(T)
    cost.c1 = _vec(p.get("c1", 0.0), T, "c1") - 2.0 * c2 * p_s
    cost.c0 = c2 * float(p_s @ p_s)
    cost.c1_pos = _vec(p.get("c1_pos", 0.0), T, "c1_pos")
    cost.c1_neg = _vec(p.get("c1_neg", 0.0), T, "c1_neg")
    cost.anchor = p_s
    return AssetModel(Kind.SLACK, T, np.eye(T), np.zeros(T), np.full(T, -INF), np.full(T, INF),
                      np.full(T, -INF), np.full(T, INF), cost)


def eval_cost(asset: AssetModel, p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    if p.shape != (asset.T,):
        raise DimensionMismatch(f"profile length {p.shape} != horizon {asset.T}")
    c = asset.cost
    a = np.zeros(asset.T) if c.anchor is None else c.anchor
    val = c.c0 + c.c1 @ p + p @ c.C2 @ p
    val += np.maximum(p - a, 0.0) @ c.c1_pos + np.maximum(a - p, 0.0) @ c.c1_neg
    if c.deadline_credit:
        val -= c.deadline_credit * min(c.deadline_need + p.sum(), c.deadline_cap)
    return float(val)


@dataclass
class FeasibilityReport:
    violations: dict[str, float]

    def feasible(self, tol: float = 1e-6, include_budget: bool = True) -> bool:
        return all(v <= tol for k, v in self.violations.items()
                   if include_budget or k != "budget")

    def __getitem__(self, key: str) -> float:
        return self.violations[key]


def control_of(asset: AssetModel, p: np.ndarray) -> np.ndarray:
    """Recover ``u`` from a horizon profile via the pseudo-inverse of ``A_T``."""
    return np.linalg.pinv(asset.A_T) @ (np.asarray(p, float) - asset.ell_T)


def feasibility_check(asset: AssetModel, p: np.ndarray, lam: np.ndarray | None = None,
                      budget: Budget | float | None = None) -> FeasibilityReport:
    """Worst violation per constraint family; zero means satisfied."""
    p = np.asarray(p, dtype=float)
    if p.shape != (asset.T,):
        raise DimensionMismatch(f"profile length {p.shape} != horizon {asset.T}")
    u = control_of(asset, p)
    # p - l must lie in the range of A
    rng = float(np.max(np.abs(asset.A_T @ u + asset.ell_T - p), initial=0.0))
    ctrl = float(np.max(np.maximum(asset.u_lo - u, 0.0) + np.maximum(u - asset.u_hi, 0.0), initial=0.0))
    if asset.fixed:
        ctrl = 0.0
    eq = float(np.max(np.abs(asset.Eu @ u - asset.eu), initial=0.0)) if len(asset.eu) else 0.0
    power = float(np.max(np.maximum(asset.p_lo - p, 0.0) + np.maximum(p - asset.p_hi, 0.0), initial=0.0))
    out = {"range": rng, "control": ctrl, "control_eq": eq, "power": power, "budget": 0.0}
    if lam is not None and budget is not None and asset.budgeted:
        r = budget.r if isinstance(budget, Budget) else float(budget)
        # the payment for consumption may not exceed the budget
        out["budget"] = max(0.0, float(-(np.asarray(lam) @ p)) - r)
    return FeasibilityReport(out)
