from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eve.grid.matpower import load_case141  # noqa: E402
from eve.grid.topology import GridTopology, Line, validate_radial  # noqa: E402
from eve.scenario import build_sensor_plan, build_topology, generate_scenario  # noqa: E402


@pytest.fixture(scope="session")
def case141():
    return load_case141()


@pytest.fixture(scope="session")
def case141x7():
    sc = generate_scenario("case141x7", seed=1)
    topo = build_topology(sc.grid)
    return sc, topo, build_sensor_plan(sc, topo)


@pytest.fixture
def toy3():
    sc = generate_scenario("toy3", seed=0)
    topo = build_topology(sc.grid)
    return sc, topo, build_sensor_plan(sc, topo)


def small_feeder(n_bus: int = 6, regions: int = 2, seed: int = 0) -> GridTopology:
    """Random radial feeder with contiguous regions cut along the bus order."""
    rng = np.random.default_rng(seed)
    lines = []
    for b in range(2, n_bus + 1):
        parent = int(rng.integers(1, b))
        lines.append(Line(parent, b, float(rng.uniform(0.005, 0.05)), float(rng.uniform(0.005, 0.05))))
    topo = validate_radial(GridTopology(tuple(range(1, n_bus + 1)), tuple(lines), 1,
                                        {b: 0 for b in range(1, n_bus + 1)}, 1.0))
    # regions by depth-first subtrees so each stays contiguous
    region_of = {1: 0}
    for k in topo.bfs_lines:
        ln = topo.lines[k]
        region_of[ln.to] = region_of[ln.frm] if len(set(region_of.values())) >= regions or ln.frm != 1 \
            else len(set(region_of.values()))
    return validate_radial(GridTopology(topo.buses, topo.lines, 1, region_of, 1.0))


def window_data(topo, plan, *, seed: int = 0, T: int = 6, sigma: float = 1.0, spread=(0.7, 1.3),
                default_load: float = 0.3):
    """Ground truth for one window and noisy readings of it.

    Returns (truth (L, T), clean readings, noisy readings, schedules, variances),
    the dicts keyed by region. Schedules are the true own-bus injections.
    """
    from eve.grid.powerflow import solve_power_flow
    from eve.grid.regions import build_region_matrices

    rng = np.random.default_rng(seed)
    base = np.array([-topo.nominal_load.get(b, (default_load, 0.0))[0] for b in topo.buses])
    p = base[:, None] * rng.uniform(*spread, (topo.n_bus, T))
    truth = solve_power_flow(topo, p, 0.6 * p).vector()
    clean, noisy, sched, var = {}, {}, {}, {}
    for n in topo.regions:
        rm = build_region_matrices(topo, n, plan)
        clean[n] = truth[rm.meas_idx]
        noisy[n] = clean[n] + sigma * rng.standard_normal(clean[n].shape)
        sched[n] = rm.S_P @ rm.S @ truth
        var[n] = np.full(len(rm.meas_idx), sigma ** 2)
    return truth, clean, noisy, sched, var
