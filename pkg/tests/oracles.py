"""Independent reference solvers used by the test suite."""

from __future__ import annotations

import cvxpy as cp
import numpy as np

from eve.resources import AssetModel, eval_cost


def asset_problem(asset: AssetModel):
    """cvxpy variable, constraints and cost expression for one asset."""
    T = asset.T
    u = cp.Variable(T)
    p = asset.A_T @ u + asset.ell_T
    cons = []
    if not asset.fixed:
        for lo, hi, expr in ((asset.u_lo, asset.u_hi, u), (asset.p_lo, asset.p_hi, p)):
            fin_lo = np.isfinite(lo)
            fin_hi = np.isfinite(hi)
            if fin_lo.any():
                cons.append(expr[np.flatnonzero(fin_lo)] >= lo[fin_lo])
            if fin_hi.any():
                cons.append(expr[np.flatnonzero(fin_hi)] <= hi[fin_hi])
    else:
        cons.append(u == asset.u_lo)
    if len(asset.eu):
        cons.append(asset.Eu @ u == asset.eu)
    c = asset.cost
    a = np.zeros(T) if c.anchor is None else c.anchor
    C2 = 0.5 * (c.C2 + c.C2.T)
    cost = c.c0 + c.c1 @ p + cp.quad_form(p, cp.psd_wrap(C2))
    cost += c.c1_pos @ cp.pos(p - a) + c.c1_neg @ cp.pos(a - p)
    if c.deadline_credit:
        cost -= c.deadline_credit * cp.minimum(c.deadline_need + cp.sum(p), c.deadline_cap)
    return p, cons, cost


def centralized_welfare(assets: list[AssetModel]) -> tuple[float, list[np.ndarray]]:
    """Minimum total cost subject to per-interval balance."""
    ps, cons, costs = [], [], []
    for a in assets:
        p, c, f = asset_problem(a)
        ps.append(p)
        cons += c
        costs.append(f)
    cons.append(sum(ps) == 0)
    prob = cp.Problem(cp.Minimize(sum(costs)), cons)
    prob.solve(solver=cp.CLARABEL)
    return float(prob.value), [np.asarray(p.value) for p in ps]


def total_cost(assets, profiles) -> float:
    return sum(eval_cost(a, p) for a, p in zip(assets, profiles))
