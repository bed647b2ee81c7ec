from __future__ import annotations

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import asset_problem
from eve.errors import DimensionMismatch, Infeasible, InvalidParams
from eve.market import Prosumer, RegionSolver
from eve.resources import FLEXIBLE, Budget, Kind, build_asset, eval_cost, feasibility_check
from eve.scenario import random_asset

KINDS = ["EV", "TCL", "Storage", "DeferrableAppliance", "Renewable", "InflexibleLoad"]
T = 6


def _subproblem_oracle(asset, lam, budget=None):
    p, cons, cost = asset_problem(asset)
    if budget is not None and asset.budgeted:
        cons = cons + [-(lam @ p) <= budget]
    prob = cp.Problem(cp.Minimize(cost - lam @ p), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@given(st.sampled_from(KINDS), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_subproblem_matches_cvxpy(kind, seed):
    rng = np.random.default_rng(seed)
    params, _ = random_asset(kind, T, rng)
    asset = build_asset(kind, params, T)
    lam = rng.uniform(20.0, 45.0, T)
    sched = RegionSolver(0, [Prosumer("x", 2, 0, asset, Budget("x", 1e6))], T).solve(lam)
    p = sched.P[0]
    assert feasibility_check(asset, p, lam, 1e6).feasible(1e-6)
    ours = eval_cost(asset, p) - lam @ p
    ref = _subproblem_oracle(asset, lam)
    assert ours <= ref + 1e-6 * max(1.0, abs(ref))


def _min_spend(asset, lam):
    p, cons, _ = asset_problem(asset)
    prob = cp.Problem(cp.Minimize(-(lam @ p)), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@pytest.mark.parametrize("seed", range(8))
def test_binding_budget_is_honoured(seed):
    rng = np.random.default_rng(seed)
    # redraw until the unconstrained spend exceeds the minimum, so a budget can bind
    for _ in range(50):
        params, _ = random_asset("EV", T, rng)
        # a departure after the horizon leaves charging optional
        params.update(t_d=T + 2)
        asset = build_asset("EV", params, T)
        lam = rng.uniform(10.0, 50.0, T)
        free = RegionSolver(0, [Prosumer("x", 2, 0, asset, Budget("x", 1e6))], T).solve(lam).P[0]
        spend, floor = -(lam @ free), _min_spend(asset, lam)
        if spend - floor > 1e-3:
            break
    else:
        pytest.fail("no draw with room between the minimum and the unconstrained spend")
    r = 0.5 * (spend + floor)
    p = RegionSolver(0, [Prosumer("x", 2, 0, asset, Budget("x", r))], T).solve(lam).P[0]
    assert -(lam @ p) <= r + 1e-6
    ref = _subproblem_oracle(asset, lam, r)
    assert abs((eval_cost(asset, p) - lam @ p) - ref) <= 1e-5 * max(1.0, abs(ref))


def test_unaffordable_deadline_is_infeasible():
    asset = build_asset("EV", {"rho": 1.0, "capacity": 2.0, "t_d": 4}, T)
    lam = np.full(T, 30.0)
    with pytest.raises(Infeasible):
        RegionSolver(0, [Prosumer("x", 2, 0, asset, Budget("x", 10.0))], T).solve(lam)


def test_sign_conventions():
    lo = build_asset("InflexibleLoad", {"load": [1.0] * T}, T)
    assert np.all(lo.ell_T == -1.0)
    pv = build_asset("Renewable", {"forecast": [0.5] * T}, T)
    assert np.all(pv.ell_T == 0.5)
    ev = build_asset("EV", {"rho": 1.0, "capacity": 2.0, "t_d": 4}, T)
    assert np.all(ev.p_hi <= 0)
    st_ = build_asset("Storage", {"rho": 1.0, "capacity": 2.0, "u_init": 1.0}, T)
    # discharging one unit in the first interval injects one unit
    u = np.array([0.0, 0, 0, 0, 0, 0])
    assert st_.profile(u)[0] == pytest.approx(1.0)


def test_slack_cost_is_quadratic_around_anchor():
    a = build_asset("Slack", {"p_s": [1.0] * T, "c2": 2.0, "c1": 3.0}, T)
    p = np.linspace(-1, 2, T)
    assert eval_cost(a, p) == pytest.approx(2.0 * np.sum((p - 1.0) ** 2) + 3.0 * p.sum())


def test_da_must_start_once():
    a = build_asset("DeferrableAppliance", {"h": [1.0, 0.5], "tau_s": 2}, T)
    u = np.zeros(T)
    u[1] = 1.0
    assert feasibility_check(a, a.profile(u)).feasible()
    assert not feasibility_check(a, np.zeros(T)).feasible()


@pytest.mark.parametrize("kind,params", [
    ("EV", {"rho": -1, "capacity": 1, "t_d": 3}),
    ("EV", {"rho": 1, "capacity": 1, "t_a": 3, "t_d": 2}),
    ("Storage", {"rho": 1, "capacity": 1, "u_init": 2}),
    ("TCL", {"R": 1, "C": 1, "eta": 0, "rho": 1, "theta_r": 20, "theta_o": 10}),
    ("DeferrableAppliance", {"h": [0.0, 1.0]}),
    ("Renewable", {"forecast": [-1.0] * T}),
    ("Slack", {"c2": -1}),
    ("EV", {"capacity": 1, "t_d": 3}),
])
def test_invalid_params(kind, params):
    with pytest.raises(InvalidParams):
        build_asset(kind, params, T)


def test_profile_length_checked():
    a = build_asset("Storage", {"rho": 1, "capacity": 1}, T)
    with pytest.raises(DimensionMismatch):
        eval_cost(a, np.zeros(T + 1))


def test_flexible_set():
    assert FLEXIBLE == {Kind.EV, Kind.DA, Kind.TCL, Kind.STORAGE}
