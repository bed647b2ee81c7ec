from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import fsolve

from conftest import small_feeder
from eve.errors import CycleDetected, Disconnected, DimensionMismatch, GridError, NonContiguousRegion
from eve.grid.matpower import CASE141X7_HEADS, parse_case_text
from eve.grid.powerflow import (
    SystemState,
    describe_var,
    distflow_residual,
    n_vars,
    physics_matrix,
    solve_power_flow,
    var_index,
)
from eve.grid.regions import (
    SensorPlan,
    build_communication_graph,
    build_region_matrices,
    find_triangles,
    place_sensors,
)
from eve.grid.topology import GridTopology, Line, validate_radial


def _line(a, b):
    return Line(a, b, 0.01, 0.02)


def test_validate_orients_lines_away_from_root():
    topo = validate_radial(GridTopology((1, 2, 3), (_line(2, 1), _line(3, 2)), 1, {1: 0, 2: 0, 3: 0}))
    assert [(ln.frm, ln.to) for ln in topo.lines] == [(1, 2), (2, 3)]
    assert topo.parent_line == {2: 0, 3: 1}


def test_cycle_rejected():
    with pytest.raises(CycleDetected):
        validate_radial(GridTopology((1, 2, 3), (_line(1, 2), _line(2, 3), _line(3, 1)), 1,
                                     {1: 0, 2: 0, 3: 0}))


def test_disconnected_rejected():
    with pytest.raises(Disconnected):
        validate_radial(GridTopology((1, 2, 3, 4), (_line(1, 2), _line(3, 4)), 1,
                                     {b: 0 for b in (1, 2, 3, 4)}))


def test_noncontiguous_region_rejected():
    with pytest.raises(NonContiguousRegion):
        validate_radial(GridTopology((1, 2, 3), (_line(1, 2), _line(2, 3)), 1, {1: 0, 2: 1, 3: 0}))


def test_unknown_root_and_missing_region():
    with pytest.raises(GridError):
        validate_radial(GridTopology((1, 2), (_line(1, 2),), 5, {1: 0, 2: 0}))
    with pytest.raises(GridError):
        validate_radial(GridTopology((1, 2), (_line(1, 2),), 1, {1: 0}))


def test_case141_shape(case141):
    assert case141.n_bus == 141 and case141.n_line == 140
    assert case141.regions == tuple(range(7))
    for reg, head in CASE141X7_HEADS.items():
        assert case141.region_of[head] == reg
    assert all(case141.region_of[b] in case141.regions for b in case141.buses)
    total_p = sum(p for p, _ in case141.nominal_load.values())
    assert 5.0 < total_p < 20.0


def test_parse_case_text_requires_tables():
    with pytest.raises(GridError):
        parse_case_text("mpc.baseMVA = 10;\nmpc.bus = [1 3 0 0];")


@given(st.integers(2, 12), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_var_index_round_trip(n_bus, seed):
    topo = small_feeder(n_bus, 1, seed)
    for j in range(n_vars(topo)):
        kind, el = describe_var(topo, j)
        assert var_index(topo, kind, el) == j


def _newton_oracle(topo, p, q):
    """Independent DistFlow solve: unknowns P, Q, c2, v2 (non-root), in p.u."""
    nb, nl = topo.n_bus, topo.n_line
    S = topo.base_mva
    pos = topo.bus_pos
    root = pos[topo.root]
    nonroot = [i for i in range(nb) if i != root]

    def unpack(y):
        P, Q, c2 = y[:nl], y[nl:2 * nl], y[2 * nl:3 * nl]
        v2 = np.ones(nb)
        v2[nonroot] = y[3 * nl:]
        return P, Q, c2, v2

    def F(y):
        P, Q, c2, v2 = unpack(y)
        out = []
        for k, ln in enumerate(topo.lines):
            kids = topo.child_lines[ln.to]
            out.append(p[pos[ln.to]] / S + P[k] - sum(P[c] for c in kids) - ln.r * c2[k])
            out.append(q[pos[ln.to]] / S + Q[k] - sum(Q[c] for c in kids) - ln.x * c2[k])
            out.append(v2[pos[ln.frm]] - v2[pos[ln.to]] - 2 * (ln.r * P[k] + ln.x * Q[k])
                       + (ln.r ** 2 + ln.x ** 2) * c2[k])
            out.append(c2[k] * v2[pos[ln.frm]] - P[k] ** 2 - Q[k] ** 2)
        return np.array(out)

    y0 = np.concatenate([np.zeros(3 * nl), np.ones(nb - 1)])
    y = fsolve(F, y0, xtol=1e-13)
    assert np.max(np.abs(F(y))) < 1e-12
    return unpack(y)


@pytest.mark.parametrize("seed", range(5))
def test_power_flow_matches_newton_oracle(seed):
    topo = small_feeder(8, 2, seed)
    rng = np.random.default_rng(seed)
    p = -rng.uniform(0.0, 0.5, topo.n_bus)
    q = 0.5 * p
    st_ = solve_power_flow(topo, p, q)
    P, Q, c2, v2 = _newton_oracle(topo, p, q)
    assert np.allclose(st_.P / topo.base_mva, P, atol=1e-9)
    assert np.allclose(st_.Q / topo.base_mva, Q, atol=1e-9)
    assert np.allclose(st_.c2, c2, atol=1e-9)
    assert np.allclose(st_.v2, v2, atol=1e-9)


def test_power_flow_batch_matches_columns(case141):
    rng = np.random.default_rng(3)
    base = np.array([-case141.nominal_load.get(b, (0, 0))[0] for b in case141.buses])
    p = base[:, None] * rng.uniform(0.7, 1.3, (1, 4))
    q = 0.6 * p
    batch = solve_power_flow(case141, p, q).vector()
    for t in range(4):
        single = solve_power_flow(case141, p[:, t], q[:, t]).vector()
        assert np.allclose(batch[:, t], single, atol=1e-12)


def test_physics_matrix_reproduces_residual(case141):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n_vars(case141), 3))
    st_ = SystemState.from_vector(x, case141)
    assert np.allclose(physics_matrix(case141) @ x, distflow_residual(st_, case141), atol=1e-12)


def test_residual_dimension_check(case141):
    st_ = SystemState.from_vector(np.zeros(n_vars(case141)), case141)
    st_.P = st_.P[:-1]
    with pytest.raises(DimensionMismatch):
        distflow_residual(st_, case141)


def test_power_flow_shape_mismatch(case141):
    with pytest.raises(DimensionMismatch):
        solve_power_flow(case141, np.zeros(3), np.zeros(3))


def test_sensor_plan_covers_boundary_and_is_observable(case141x7):
    sc, topo, plan = case141x7
    for reg in topo.regions:
        rm = build_region_matrices(topo, reg, plan)
        M = rm.S_A.T @ rm.S_A + rm.H.T @ rm.H + rm.S_P.T @ rm.S_P
        live = np.flatnonzero(np.any(M != 0, axis=1))
        w = np.linalg.eigvalsh(M[np.ix_(live, live)])
        assert w.min() > 1e-2 * w.max() * 0.999
    for k in topo.tie_lines():
        ln = topo.lines[k]
        owner = topo.region_of[ln.to]
        assert var_index(topo, "P", k) in plan.measured[owner]


def test_sensor_plan_json_round_trip(case141x7):
    _, _, plan = case141x7
    assert SensorPlan.from_json(plan.to_json()) == plan


def test_tie_line_meters_visible_to_both_ends(case141x7):
    _, topo, plan = case141x7
    for k in topo.tie_lines():
        ln = topo.lines[k]
        j = var_index(topo, "P", k)
        for reg in (topo.region_of[ln.frm], topo.region_of[ln.to]):
            assert j in plan.readings_for(topo, reg)


def test_regions_0_and_1_share_the_documented_buses(case141x7):
    _, topo, plan = case141x7
    rm = build_region_matrices(topo, 0, plan)
    shared_buses = {describe_var(topo, int(j))[1] for j in rm.shared_idx[1]
                    if describe_var(topo, int(j))[0] in ("p", "q", "v2")}
    assert {42, 43, 54, 73} <= shared_buses


def test_communication_graph_connected_with_triangle(case141x7):
    _, topo, plan = case141x7
    g = build_communication_graph(topo, plan)
    assert g.connected()
    assert find_triangles(g.nodes, g.edges)
    for n in g.nodes:
        rm = build_region_matrices(topo, n, plan)
        assert set(rm.neighbors) == set(g.neighbors(n))


def test_place_sensors_is_seeded(case141):
    a = place_sensors(case141, seed=4)
    b = place_sensors(case141, seed=4)
    c = place_sensors(case141, seed=5)
    assert a == b and a != c
