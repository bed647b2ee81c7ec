from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eve.adversary import (
    AttackSpec,
    build_stealth_attack,
    message_hook,
    message_noise,
    perturb_measurements,
    perturb_message,
)
from eve.errors import AdversaryError, NotANeighbor, UnknownSensor
from eve.grid.regions import build_communication_graph, build_region_matrices


def test_parse_round_trip():
    spec = AttackSpec.parse("message:3:scale=2,seed=7,edges=1/2")
    assert spec == AttackSpec(3, "message", 2.0, edges=(1, 2), seed=7)
    assert AttackSpec.from_dict(spec.to_dict()) == spec
    assert AttackSpec.parse("none") is None


@pytest.mark.parametrize("text", ["message", "bogus:1", "message:1:colour=red", "message:1:scale=-1"])
def test_parse_rejects(text):
    with pytest.raises(AdversaryError):
        AttackSpec.parse(text)


def test_offsets_need_targets():
    with pytest.raises(AdversaryError):
        AttackSpec(0, "measurement", offsets=(1.0,))


def test_measurement_offsets_applied():
    z = np.zeros((3, 2))
    spec = AttackSpec(0, "measurement", scale=2.0, targets=(11, 13), offsets=(1.0, -0.5))
    out = perturb_measurements(z, [10, 11, 13], spec)
    assert np.array_equal(out, [[0, 0], [2, 2], [-1, -1]])
    assert not z.any()
    with pytest.raises(UnknownSensor):
        perturb_measurements(z, [10, 12, 14], spec)


@given(st.integers(1, 20), st.integers(1, 6), st.floats(0.1, 5.0), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_message_noise_has_prescribed_norm(n, T, scale, seed):
    a = message_noise((n, T), AttackSpec(0, scale=scale, seed=seed), 3, 0, 1)
    assert np.allclose(np.linalg.norm(a, axis=0), 0.5 * np.sqrt(n) * scale)


def test_message_noise_is_seeded_per_round():
    spec = AttackSpec(0, seed=1)
    a = message_noise((4, 2), spec, 1, 0, 1)
    assert np.array_equal(a, message_noise((4, 2), spec, 1, 0, 1))
    assert not np.array_equal(a, message_noise((4, 2), spec, 2, 0, 1))


def test_zero_scale_leaves_message(case141x7):
    _, topo, plan = case141x7
    g = build_communication_graph(topo, plan)
    msg = np.ones((3, 2))
    nb = g.neighbors(0)[0]
    assert np.array_equal(perturb_message(msg, AttackSpec(0, scale=0.0), 1, nb, g), msg)


def test_non_neighbour_rejected(case141x7):
    _, topo, plan = case141x7
    g = build_communication_graph(topo, plan)
    far = next(n for n in g.nodes if n != 3 and n not in g.neighbors(3))
    with pytest.raises(NotANeighbor):
        perturb_message(np.ones((2, 1)), AttackSpec(3), 1, far, g)
    with pytest.raises(NotANeighbor):
        message_hook(AttackSpec(3, edges=(far,)), g)


def test_hook_only_touches_attacker_traffic():
    hook = message_hook(AttackSpec(2, "message", edges=(1,)))
    msg = np.zeros((2, 1))
    assert hook(0, 1, 1, msg) is msg
    assert hook(2, 3, 1, msg) is msg
    assert not np.array_equal(hook(2, 1, 1, msg), msg)
    silent = message_hook(AttackSpec(2, "silent"))
    assert silent(2, 1, 1, msg) is None and silent(1, 2, 1, msg) is msg
    assert message_hook(AttackSpec(2, "measurement")) is None
    assert message_hook(None) is None


def test_stealth_vector_is_invisible_to_local_physics(case141x7):
    _, topo, plan = case141x7
    for reg in topo.regions:
        rm = build_region_matrices(topo, reg, plan)
        a = build_stealth_attack(rm)
        if a is None:
            continue
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert np.max(np.abs(rm.H @ rm.S_A.T @ a)) < 1e-9
