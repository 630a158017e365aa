import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgpg.scenario import (ChannelParams, Geometry, Realization, ScenarioError, ScenarioSpec,
                           UserRequest, generate_realization, hover_time, success_rate,
                           trajectory_schedule, trajectory_time, user_rate)

from conftest import RATE_BELOW, build

TRAVERSE = 40.0 / 30.0


def _user(offset=(0.0, 0.0), fading=1.0):
    return UserRequest(0, 0, offset, 1e8, 0.0, fading)


def _geom():
    return Geometry(((0.0, 0.0),))


def test_table_one_rate():
    # gamma = (0.1 W * 100^-2) / 10^-13.4 W ~ 2.512e8 ; c = B log2(1 + gamma)
    gamma = 0.1 * 100.0 ** -2 / 10 ** -13.4
    assert gamma == pytest.approx(2.512e8, rel=1e-3)
    expected = 20e6 * math.log2(1 + gamma)
    assert expected == pytest.approx(5.58e8, rel=1e-3)
    assert user_rate(ChannelParams(), _geom(), _user()) == pytest.approx(expected, rel=1e-12)
    assert RATE_BELOW == pytest.approx(expected, rel=1e-12)


def test_fading_times_four_adds_two_bandwidths():
    c, g = ChannelParams(), _geom()
    diff = user_rate(c, g, _user(fading=4.0)) - user_rate(c, g, _user(fading=1.0))
    assert diff == pytest.approx(2 * 20e6, rel=1e-3)


@given(st.floats(0.0, 19.0), st.floats(0.01, 1.0), st.floats(0.1, 5.0))
def test_rate_decreasing_in_offset(r, dr, fading):
    c, g = ChannelParams(), _geom()
    near = user_rate(c, g, _user((r, 0.0), fading))
    far = user_rate(c, g, _user((r + dr, 0.0), fading))
    assert far < near


def test_hover_examples():
    R = build([(300.0, 0.0)], [(0, 0.0, 10.0)])
    assert hover_time(R, 0, 0.0) == pytest.approx(10.0 - TRAVERSE, rel=1e-12)
    assert hover_time(R, 0, 0.0) == pytest.approx(8.667, abs=1e-3)
    R2 = build([(300.0, 0.0)], [(0, 0.0, 3.0), (0, 0.0, 9.0)])
    assert hover_time(R2, 0, 5.0) == pytest.approx(7.667, abs=1e-3)
    # nobody active yet
    R3 = build([(300.0, 0.0)], [(0, 50.0, 9.0)])
    assert hover_time(R3, 0, 10.0) == 0.0
    # short delays clamp at zero
    R4 = build([(300.0, 0.0)], [(0, 0.0, 1.0)])
    assert hover_time(R4, 0, 5.0) == 0.0
    with pytest.raises(ScenarioError):
        hover_time(R, 3, 0.0)


def test_rb_cap_serves_earliest():
    R = build([(300.0, 0.0)], [(0, 3.0, 9.0), (0, 1.0, 2.0), (0, 2.0, 4.0)], num_rbs=2)
    served, hover, ids = R.visit(R.fresh_served(), 0, 10.0)
    assert set(ids) == {1, 2}
    assert hover == pytest.approx(4.0 - TRAVERSE)
    _, hover2, ids2 = R.visit(served, 0, 10.0)
    assert ids2 == (0,) and hover2 == pytest.approx(9.0 - TRAVERSE)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 400.0), st.floats(0.0, 400.0))
def test_hover_nondecreasing_in_arrival(seed, a, b):
    spec = ScenarioSpec(num_users=30, num_clusters=3, bits={"kind": "uniform", "low": 1e8, "high": 3e9})
    R = generate_realization(spec, seed)
    lo, hi = min(a, b), max(a, b)
    for l in range(3):
        assert hover_time(R, l, lo) <= hover_time(R, l, hi)


def test_trajectory_time_examples():
    R = build([(300.0, 0.0)], [(0, 0.0, 10.0)])
    assert trajectory_time(R, []) == 0.0
    assert trajectory_time(R, [0]) == pytest.approx(28.667, abs=1e-3)
    assert trajectory_time(R, [0]) == pytest.approx(20.0 + 10.0 - TRAVERSE, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 3), max_size=12))
def test_trajectory_time_two_paths_agree(seed, traj):
    spec = ScenarioSpec(num_users=40, num_clusters=4, bits={"kind": "uniform", "low": 1e8, "high": 3e9})
    R = generate_realization(spec, seed)
    sched = trajectory_schedule(R, traj)
    if not traj:
        return
    g = R.geometry
    stepwise = g.horizon_s - sched[-1].remaining_s + g.travel_time(traj[-1], -1)
    assert trajectory_time(R, traj) == pytest.approx(stepwise, rel=1e-9)


def test_success_rate_examples():
    users = [(0, 0.0, 0.5)] * 68 + [(1, 390.0, 0.5)] * 32
    R = build([(300.0, 0.0), (-300.0, 0.0)], users)
    assert R.num_requesting == 100
    assert success_rate(R, [0]) == pytest.approx(0.68, abs=1e-12)
    assert success_rate(R, []) == 0.0
    R2 = build([(300.0, 0.0), (-300.0, 0.0)], [(0, 0.0, 0.5)] * 5 + [(1, 0.0, 0.5)] * 5)
    assert success_rate(R2, [0, 1]) == 1.0
    # a user is counted once however many visits
    assert success_rate(R2, [0, 1, 0, 1]) == 1.0


def test_success_rate_ignores_requests_outside_horizon():
    R = build([(300.0, 0.0)], [(0, 0.0, 0.5), (0, 500.0, 0.5)], horizon=100.0)
    assert R.num_requesting == 1
    assert success_rate(R, [0]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 2), max_size=8), st.integers(0, 2))
def test_success_rate_monotone(seed, traj, extra):
    R = generate_realization(ScenarioSpec(num_users=30, num_clusters=3), seed)
    a = success_rate(R, traj)
    b = success_rate(R, traj + [extra])
    assert 0.0 <= a <= b <= 1.0


def test_fading_unit_mean():
    spec = ScenarioSpec(num_users=100_000, num_clusters=1)
    R = generate_realization(spec, 7)
    mean = np.mean([u.fading_gain for u in R.users])
    assert abs(mean - 1.0) < 0.02


def test_delays_positive_finite():
    R = generate_realization(ScenarioSpec(), 3)
    d = np.array(list(R.delays.values()))
    assert np.all(d > 0) and np.all(np.isfinite(d))


def test_generation_deterministic():
    spec = ScenarioSpec()
    assert generate_realization(spec, 5).fingerprint() == generate_realization(spec, 5).fingerprint()
    assert generate_realization(spec, 5).fingerprint() != generate_realization(spec, 6).fingerprint()
    # geometry is shared between realizations of one spec
    assert generate_realization(spec, 5).geometry == generate_realization(spec, 6).geometry


def test_degenerate_draws_resampled():
    spec = ScenarioSpec(num_users=1, num_clusters=1,
                        request_time={"kind": "uniform", "low": 0.0, "high": 4000.0})
    for seed in range(20):
        assert generate_realization(spec, seed).num_requesting == 1


def test_records_round_trip():
    R = generate_realization(ScenarioSpec(num_users=20, num_clusters=3), 11)
    back = Realization.from_records(R.to_records())
    assert back.fingerprint() == R.fingerprint()
    assert back.delays == R.delays
    assert back.geometry == R.geometry


def test_cluster_separation_and_counts():
    spec = ScenarioSpec(num_users=101, num_clusters=6)
    g = spec.geometry()
    P = np.array(g.cluster_positions)
    d = np.linalg.norm(P[:, None] - P[None], axis=-1) + np.eye(6) * 1e9
    assert d.min() >= spec.min_cluster_separation_m
    R = generate_realization(spec, 0)
    counts = np.bincount([u.cluster_id for u in R.users], minlength=6)
    assert counts.sum() == 101 and counts.max() - counts.min() <= 1


@pytest.mark.parametrize("kw", [
    dict(num_users=0), dict(num_clusters=0), dict(horizon_s=-1.0), dict(speed_mps=0.0),
    dict(cluster_weights=[1.0, -1.0, 1.0, 1.0, 1.0, 1.0]),
    dict(bits={"kind": "uniform", "low": 5.0, "high": 1.0}),
])
def test_invalid_specs_rejected(kw):
    with pytest.raises(ScenarioError):
        generate_realization(ScenarioSpec(**kw), 0)
