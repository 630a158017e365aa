import math

import numpy as np
import pytest

from mgpg import mdp
from mgpg.scenario import (ChannelParams, Geometry, Realization, UserRequest, success_rate,
                           trajectory_time)

# Every rollout made anywhere in the suite (tests, learners, campaigns) is
# checked against the return-epoch constraint and reward telescoping.
AUDIT = {"rollouts": 0, "worst_telescoping": 0.0, "max_return_epoch_slack": -math.inf}
ACCEPTANCE_LINES = []
_rollout = mdp.rollout


def _audited_rollout(realization, policy, rng, greedy=False):
    e = _rollout(realization, policy, rng, greedy)
    traj = e.trajectory()
    t0 = trajectory_time(realization, traj)
    gap = abs(float(np.sum(e.rewards)) - success_rate(realization, traj))
    AUDIT["rollouts"] += 1
    AUDIT["worst_telescoping"] = max(AUDIT["worst_telescoping"], gap)
    AUDIT["max_return_epoch_slack"] = max(AUDIT["max_return_epoch_slack"], t0 - realization.horizon)
    assert t0 <= realization.horizon, f"return epoch {t0!r} exceeds horizon {realization.horizon!r}"
    assert gap <= 1e-12, f"rewards sum differs from success rate by {gap:.3e}"
    return e


mdp.rollout = _audited_rollout


def pytest_terminal_summary(terminalreporter):
    terminalreporter.section("rollout audit")
    terminalreporter.write_line(
        f"{AUDIT['rollouts']} rollouts checked; max(t0 - T) = {AUDIT['max_return_epoch_slack']:.6g} s; "
        f"worst |sum r - success rate| = {AUDIT['worst_telescoping']:.3e}")
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# Default link budget with unit fading straight below the drone at 100 m,
# worked out by hand: P/sigma^2 = 10^(124/10), path loss 100^-2.
SNR_BELOW = 10 ** 12.4 * 1e-4
RATE_BELOW = 20e6 * math.log2(1.0 + SNR_BELOW)


def build(positions, users, horizon=400.0, origin=(0.0, 0.0), num_rbs=100):
    """Hand-built realization.

    ``users`` is a list of ``(cluster, request_time_s, delay_s)``; every user sits
    right under the cluster centre with unit fading, so its request size is
    ``delay_s * RATE_BELOW`` bits.
    """
    g = Geometry(tuple(tuple(p) for p in positions), origin, 100.0, 20.0, 30.0, horizon)
    reqs = [UserRequest(i, c, (0.0, 0.0), d * RATE_BELOW, t, 1.0)
            for i, (c, t, d) in enumerate(users)]
    return Realization(g, ChannelParams(num_rbs=num_rbs), reqs, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
