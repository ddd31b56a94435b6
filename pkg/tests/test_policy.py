import math
from functools import partial

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twinalign.geometry import OUConfig, Path, PathExhaustedError, generate_ou_path, project_curvilinear
from twinalign.models import ControlInput, VehicleState, kinematic_step
from twinalign.policy import (
    AgentState,
    ExpertGains,
    RewardWeights,
    assemble_state,
    compute_reward,
    expert_policy,
    huber,
    state_dim,
)

LINE = Path(np.column_stack([np.arange(201.0), np.zeros(201)]))


def test_waypoints_on_straight_path():
    s = assemble_state(VehicleState(), ControlInput(), LINE, 8.0, 3, 1.0)
    np.testing.assert_allclose(s.par.waypoints, [[1, 0], [2, 0], [3, 0]], atol=1e-12)


def test_waypoints_rotated_frame():
    s = assemble_state(VehicleState(theta=math.pi / 2), ControlInput(), LINE, 8.0, 3, 1.0)
    np.testing.assert_allclose(s.par.waypoints, [[0, -1], [0, -2], [0, -3]], atol=1e-12)


def test_waypoints_lateral_offset():
    s = assemble_state(VehicleState(x=10.0, y=0.5), ControlInput(), LINE, 8.0, 3, 1.0)
    np.testing.assert_allclose(s.par.waypoints[:, 1], -0.5, atol=1e-12)
    np.testing.assert_allclose(s.par.waypoints[:, 0], [1, 2, 3], atol=1e-12)


def test_last_waypoint_repeats_near_end():
    s = assemble_state(VehicleState(x=198.0), ControlInput(), LINE, 8.0, 5, 1.0)
    np.testing.assert_allclose(s.par.waypoints[:, 0], [1, 2, 2, 2, 2], atol=1e-12)


def test_beyond_end_raises():
    with pytest.raises(PathExhaustedError):
        assemble_state(VehicleState(x=205.0), ControlInput(), LINE, 8.0, 3, 1.0)


def test_flatten_round_trip():
    s = assemble_state(VehicleState(x=3.0, v=4.0, gamma=0.1), ControlInput(0.5, -0.1), LINE, 7.0)
    flat = s.flatten()
    assert flat.shape == (state_dim(),) == (7 + 1 + 2 * 80,)
    back = AgentState.unflatten(flat)
    np.testing.assert_array_equal(back.flatten(), flat)
    assert back.obs.a_prev == 0.5 and back.par.v_target == 7.0


def test_huber_examples():
    assert huber(0.0) == 0.0
    assert huber(1.0) == pytest.approx(0.125)
    assert huber(2.0) == pytest.approx(0.375)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_huber_properties(x, y):
    assert huber(x) == huber(-x)
    assert abs(huber(x) - huber(y)) <= 0.25 * abs(x - y) + 1e-12
    if abs(x) <= abs(y):
        assert huber(x) <= huber(y)


def test_huber_is_c1_at_delta():
    eps = 1e-7
    left = (huber(1.0) - huber(1.0 - eps)) / eps
    right = (huber(1.0 + eps) - huber(1.0)) / eps
    assert left == pytest.approx(right, abs=1e-6)


def test_reward_all_zero():
    r = compute_reward(0.0, 0.0, 8.0, 0.0, 2.9, ControlInput(), ControlInput(), 0.1)
    assert r.total == 0.0 and all(t == 0.0 for t in r.terms())


def test_reward_progress_only():
    w = RewardWeights(0, 0, 1.0, 0, 0, 0, 0, 0)
    r = compute_reward(0.0, 2.0, 3.0, 0.0, 2.9, ControlInput(), ControlInput(), 0.1, w)
    assert r.total == pytest.approx(0.2)


def test_reward_hold_term():
    r = compute_reward(0.0, 0.5, 0.0, 0.0, 2.9, ControlInput(), ControlInput(), 0.1)
    assert r.hold == RewardWeights().R_hold


@given(
    st.floats(-3, 3), st.floats(0, 15), st.floats(0, 12), st.floats(-0.5, 0.5),
    st.floats(-2, 2), st.floats(-0.5, 0.5), st.floats(-2, 2), st.floats(-0.5, 0.5),
)
def test_reward_decomposition_and_upper_bound(d, v, vt, g, a, w, ap, wp):
    r = compute_reward(d, v, vt, g, 2.9, ControlInput(a, w), ControlInput(ap, wp), 0.1)
    assert abs(r.total - sum(r.terms())) <= 1e-12
    assert r.total <= 0.5 * max(vt, 0.0) * 0.1 + 1e-12


def test_reward_weight_signs_validated():
    with pytest.raises(ValueError):
        RewardWeights(R_dev=1.0)
    with pytest.raises(ValueError):
        RewardWeights(R_progress=-1.0)


def test_expert_equilibrium_and_speed_sign():
    s = assemble_state(VehicleState(x=20.0, v=8.0), ControlInput(), LINE, 8.0)
    u = expert_policy(s)
    assert abs(u.a) <= 0.05 and abs(u.omega) <= 0.05
    s = assemble_state(VehicleState(x=20.0, v=7.0), ControlInput(), LINE, 8.0)
    assert expert_policy(s).a > 0
    assert expert_policy(s) == expert_policy(s)


def _drive(path, v_target, steps=4000, g=ExpertGains()):
    veh, prev, hint = VehicleState(*path.waypoints[0], path_heading(path), 0.0, 0.0), ControlInput(), None
    offsets = []
    for _ in range(steps):
        try:
            s = assemble_state(veh, prev, path, v_target, hint=hint)
        except PathExhaustedError:
            break
        hint = s.par.sigma
        offsets.append(abs(project_curvilinear(veh.pose, path, hint).d))
        prev = expert_policy(s, g)
        veh = kinematic_step(veh, prev, g.dt)
        if veh.v < 0.05 and hint > path.length - 5:
            break
    return np.array(offsets), veh, hint


def path_heading(path):
    d = path.waypoints[1] - path.waypoints[0]
    return math.atan2(d[1], d[0])


@pytest.mark.parametrize("seed", [0, 7, 13])
def test_expert_tracks_ou_paths(seed):
    path = generate_ou_path(OUConfig(seed=seed, n_points=400))
    offsets, veh, sigma = _drive(path, 8.0)
    assert offsets.mean() <= 0.3 and offsets.max() < 1.0
    # stops short of the end
    assert veh.v < 0.05 and path.length - 3.0 < sigma < path.length


def test_expert_stops_at_margin_before_end():
    _, veh, sigma = _drive(LINE, 8.0)
    assert veh.v < 0.05
    assert sigma == pytest.approx(LINE.length - ExpertGains().stop_margin, abs=0.3)
