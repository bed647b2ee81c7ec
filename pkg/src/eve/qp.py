"""Dense primal-dual interior-point solver for small convex QPs / LPs.

Solves a batch of same-shaped problems

    min 0.5 y'Gy + g'y   s.t.  E y = e,  F y <= f

with Mehrotra predictor-corrector steps. Problem sizes here are a few
dozen variables, so everything is dense and batched over the leading axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, SolverStall

log = logging.getLogger(__name__)


@dataclass
class QPResult:
    y: np.ndarray        # (B, n)
    nu: np.ndarray       # (B, me) equality multipliers
    mu: np.ndarray       # (B, mi) inequality multipliers
    iterations: int
    stationarity: np.ndarray  # (B,) inf-norm of the Lagrangian gradient


def _mv(A, x):
    return np.einsum("bij,bj->bi", A, x)


def _mtv(A, x):
    return np.einsum("bji,bj->bi", A, x)


def solve_qp_batch(G, g, E, e, F, f, *, tol: float = 1e-9, max_iter: int = 100,
                   reg: float = 1e-11) -> QPResult:
    G, g, E, e, F, f = (np.asarray(a, dtype=float) for a in (G, g, E, e, F, f))
    B, n = g.shape
    me, mi = e.shape[1], f.shape[1]
    y = np.zeros((B, n))
    nu = np.zeros((B, me))
    if mi:
        z = np.maximum(f - _mv(F, y), 1.0)
        mu = np.ones((B, mi))
    else:
        z = np.zeros((B, 0))
        mu = np.zeros((B, 0))
    scale = 1.0 + np.max(np.abs(g), axis=1, initial=0.0)
    pscale = 1.0 + np.maximum(np.max(np.abs(e), axis=1, initial=0.0),
                              np.max(np.abs(np.clip(f, -1e6, 1e6)), axis=1, initial=0.0))
    Ek = np.zeros((B, n + me, n + me))
    idx_n = np.arange(n)
    idx_m = np.arange(n, n + me)
    done = np.zeros(B, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        r_d = _mv(G, y) + g + _mtv(E, nu) + _mtv(F, mu)
        r_e = _mv(E, y) - e
        r_f = _mv(F, y) + z - f
        gap = np.einsum("bi,bi->b", mu, z) / max(mi, 1)
        err_d = np.max(np.abs(r_d), axis=1, initial=0.0) / scale
        err_p = np.maximum(np.max(np.abs(r_e), axis=1, initial=0.0),
                           np.max(np.abs(r_f), axis=1, initial=0.0)) / pscale
        done = (err_d < tol) & (err_p < tol) & (gap < tol)
        if done.all():
            break
        act = ~done
        W = mu[act] / z[act] if mi else np.zeros((act.sum(), 0))
        K = G[act] + np.einsum("bki,bk,bkj->bij", F[act], W, F[act])
        K[:, idx_n, idx_n] += reg
        Ka = Ek[: act.sum()].copy()
        Ka[:, :n, :n] = K
        Ka[:, :n, n:] = np.swapaxes(E[act], 1, 2)
        Ka[:, n:, :n] = E[act]
        Ka[:, idx_m, idx_m] = -reg

        za, mua, Fa = z[act], mu[act], F[act]

        def newton(r_c):
            rhs_y = -r_d[act] - _mtv(Fa, (r_c + mua * r_f[act]) / za) if mi else -r_d[act]
            rhs = np.concatenate([rhs_y, -r_e[act]], axis=1)
            sol = np.linalg.solve(Ka, rhs[..., None])[..., 0]
            dy, dnu = sol[:, :n], sol[:, n:]
            if mi:
                dz = -r_f[act] - _mv(Fa, dy)
                dmu = (r_c - mua * dz) / za
            else:
                dz = dmu = np.zeros((len(dy), 0))
            return dy, dnu, dz, dmu

        def max_step(v, dv):
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                ratio = np.where(dv < 0, -v / dv, np.inf)
            return np.minimum(1.0, np.min(ratio, axis=1, initial=np.inf))

        if mi:
            # predictor
            dy, dnu, dz, dmu = newton(-mua * za)
            a_aff = np.minimum(max_step(za, dz), max_step(mua, dmu))
            gap_a = gap[act]
            gap_aff = np.einsum("bi,bi->b", mua + a_aff[:, None] * dmu,
                                za + a_aff[:, None] * dz) / mi
            sigma = np.clip((gap_aff / np.maximum(gap_a, 1e-300)) ** 3, 0.0, 1.0)
            # corrector
            r_c = -mua * za - dz * dmu + (sigma * gap_a)[:, None]
            dy, dnu, dz, dmu = newton(r_c)
            alpha = np.minimum(1.0, 0.995 * np.minimum(max_step(za, dz), max_step(mua, dmu)))
        else:
            dy, dnu, dz, dmu = newton(np.zeros((act.sum(), 0)))
            alpha = np.ones(act.sum())
        a = alpha[:, None]
        y[act] += a * dy
        nu[act] += a * dnu
        if mi:
            z[act] = np.maximum(za + a * dz, 1e-300)
            mu[act] = np.maximum(mua + a * dmu, 1e-300)
        # multipliers blowing up certify an empty feasible set in practice
        diverged = ~np.isfinite(y).all(axis=1) | (np.max(mu, axis=1, initial=0.0) > 1e13 * scale)
        if diverged.any():
            raise Infeasible(f"{int(diverged.sum())} problem(s) have no feasible point")
    else:
        bad = ~done
        prim = np.maximum(np.max(np.abs(_mv(E, y) - e), axis=1, initial=0.0),
                          np.max(np.maximum(_mv(F, y) - f, 0.0), axis=1, initial=0.0)) / pscale
        if np.any(bad & ~(prim <= 1e-6)):
            raise Infeasible(f"{int(np.sum(bad & (prim > 1e-6)))} problem(s) have no feasible point")
        if np.any(bad):
            # all primal-feasible: accept when the solution is accurate enough
            r_d = _mv(G, y) + g + _mtv(E, nu) + _mtv(F, mu)
            err = np.max(np.abs(r_d), axis=1, initial=0.0) / scale
            if np.any(~(err[bad] <= 1e-6)):
                raise SolverStall(f"interior-point cap of {max_iter} iterations reached")
    r_d = _mv(G, y) + g + _mtv(E, nu) + _mtv(F, mu)
    return QPResult(y=y, nu=nu, mu=mu, iterations=it,
                    stationarity=np.max(np.abs(r_d), axis=1, initial=0.0))


def solve_qp(G, g, E=None, e=None, F=None, f=None, **kw) -> QPResult:
    """Single-problem convenience wrapper around :func:`solve_qp_batch`."""
    n = len(g)
    E = np.zeros((0, n)) if E is None else np.atleast_2d(E)
    e = np.zeros(0) if e is None else np.atleast_1d(e)
    F = np.zeros((0, n)) if F is None else np.atleast_2d(F)
    f = np.zeros(0) if f is None else np.atleast_1d(f)
    r = solve_qp_batch(np.asarray(G, float)[None], np.asarray(g, float)[None], E[None], e[None],
                       F[None], f[None], **kw)
    return QPResult(r.y[0], r.nu[0], r.mu[0], r.iterations, r.stationarity[0])
