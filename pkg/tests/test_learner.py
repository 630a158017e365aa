import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgpg import checks, mdp
from mgpg.learner import (LearnerConfig, TrainingDiverged, greedy_utility, meta_grad,
                          mgpg_train, policy_objective_grad, return_eta_derivative, returns,
                          vanilla_pg_train)
from mgpg.policy import SoftmaxPolicy, axpy_update, grad_log_prob, init_params
from mgpg.scenario import generate_realization

from conftest import build


def test_returns_examples():
    r = [0.125, 0.0, 0.25, 0.375]
    np.testing.assert_array_equal(returns(r, 1.0), [0.75, 0.625, 0.625, 0.375])
    x = np.random.default_rng(0).random(40)
    assert np.array_equal(returns(x, 1.0), np.cumsum(x[::-1])[::-1])
    np.testing.assert_array_equal(returns(r, 0.0), r)
    assert returns([1, 2, 3], 0.5)[0] == pytest.approx(2.75, abs=1e-15)
    assert returns([], 0.7).size == 0


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=25), st.floats(0.0, 1.0))
def test_returns_equal_double_sum(r, eta):
    K = len(r)
    direct = [sum(eta ** (j - k) * r[j] for j in range(k, K)) for k in range(K)]
    np.testing.assert_allclose(returns(r, eta), direct, rtol=0, atol=1e-12)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=25), st.floats(0.0, 1.0))
def test_eta_derivative_equals_double_sum(r, eta):
    K = len(r)
    direct = [sum((j - k) * eta ** (j - k - 1) * r[j] for j in range(k + 1, K)) for k in range(K)]
    np.testing.assert_allclose(return_eta_derivative(r, eta), direct, rtol=0, atol=1e-11)


def test_eta_derivative_finite_difference():
    rng = np.random.default_rng(0)
    r = rng.random(12)
    h = 1e-6
    fd = (returns(r, 0.6 + h) - returns(r, 0.6 - h)) / (2 * h)
    np.testing.assert_allclose(return_eta_derivative(r, 0.6), fd, rtol=1e-7)


def _config(rng):
    params, e, eta, real = checks.random_configuration(rng)
    return params, e, eta, real


def test_policy_grad_zero_rewards():
    rng = np.random.default_rng(1)
    params, e, eta, _ = _config(rng)
    zero = dataclasses.replace(e, steps=[dataclasses.replace(s, reward=0.0) for s in e.steps])
    assert not policy_objective_grad(zero, params, eta).any()


def test_policy_grad_single_step():
    rng = np.random.default_rng(2)
    params, e, eta, _ = _config(rng)
    s = dataclasses.replace(e.steps[0], reward=0.3)
    one = mdp.Experience([s], 0.3)
    expect = 0.3 * grad_log_prob(params, s.state, s.mask, s.action)
    np.testing.assert_allclose(policy_objective_grad(one, params, eta), expect, atol=1e-15)


def test_policy_grad_matches_double_sum_form():
    rng = np.random.default_rng(3)
    for _ in range(10):
        params, e, eta, _ = _config(rng)
        r = e.rewards
        K = len(r)
        y = [grad_log_prob(params, s.state, s.mask, s.action) for s in e.steps]
        double = sum(eta ** (j - k) * r[j] * y[k] for k in range(K) for j in range(k, K))
        np.testing.assert_allclose(policy_objective_grad(e, params, eta), double, rtol=0, atol=1e-12)


def test_policy_grad_finite_difference():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        params, e, eta, _ = _config(rng)
        coords = rng.choice(params.theta.size, size=min(64, params.theta.size), replace=False)
        worst = max(worst, checks.policy_grad_error(params, e, eta, coords))
    assert worst < 1e-5


def test_meta_grad_zero_cases():
    rng = np.random.default_rng(5)
    params, e, eta, real = _config(rng)
    new = axpy_update(params, policy_objective_grad(e, params, eta), 0.1)
    e2 = mdp.rollout(real, SoftmaxPolicy(new), rng)
    zero = lambda x: dataclasses.replace(x, steps=[dataclasses.replace(s, reward=0.0) for s in x.steps])
    assert meta_grad(zero(e), params, eta, e2, new, 0.1) == 0.0
    assert meta_grad(e, params, eta, zero(e2), new, 0.1) == 0.0


def test_meta_grad_finite_difference():
    rng = np.random.default_rng(6)
    worst, done = 0.0, 0
    while done < 10:
        params, e, eta, real = _config(rng)
        err, analytic = checks.meta_grad_error(params, e, eta, real, rng, 0.3)
        if analytic == 0.0:
            continue
        worst = max(worst, err)
        done += 1
    assert worst < 1e-4


def test_rel_error_normwise():
    assert checks.rel_error([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert checks.rel_error([1.0, 0.0], [1.0, 1e-9]) == pytest.approx(1e-9)


def _tiny(seed=0):
    return generate_realization(checks.tiny_scenario(3, 15, 120.0), seed)


def test_meta_step_zero_is_pg_bitwise():
    R = [_tiny(0), _tiny(1)]
    cfg = LearnerConfig(policy_step=0.3, meta_step=0.0, eta_init=0.8, episodes=60)
    pa, ma = mgpg_train(R, cfg, 7)
    pb, mb = vanilla_pg_train(R, cfg, 7)
    assert np.array_equal(pa.theta, pb.theta)
    assert ma.utility == mb.utility
    assert set(ma.eta) == {0.8}
    assert all(math.isnan(x) for x in mb.utility_prime)
    assert not any(math.isnan(x) for x in ma.utility_prime)


def test_zero_episodes_returns_init():
    cfg = LearnerConfig(episodes=0)
    p, m = mgpg_train(_tiny(), cfg, 3)
    q = init_params(3, np.random.default_rng(np.random.SeedSequence(3).spawn(3)[0]))
    assert np.array_equal(p.theta, q.theta)
    assert m.utility == [] and m.eta == []


@pytest.mark.parametrize("seed", range(5))
def test_eta_stays_in_bounds(seed):
    cfg = LearnerConfig(policy_step=0.3, meta_step=50.0, eta_init=0.5, episodes=150,
                        eta_bounds=(0.2, 0.9))
    _, m = mgpg_train(lambda i: _tiny(i % 3), cfg, seed)
    assert all(0.2 <= x <= 0.9 for x in m.eta)
    assert len(m.eta) == len(m.utility) == len(m.grad_norm) == 150


def test_training_deterministic():
    cfg = LearnerConfig(policy_step=0.3, meta_step=0.5, eta_init=0.9, episodes=80)
    a = mgpg_train(lambda i: _tiny(i % 2), cfg, 11)
    b = mgpg_train(lambda i: _tiny(i % 2), cfg, 11)
    assert np.array_equal(a[0].theta, b[0].theta)
    assert json.dumps(a[1].to_records()) == json.dumps(b[1].to_records())
    assert a[1].eta == b[1].eta


def test_nonfinite_aborts(monkeypatch):
    import mgpg.learner as learner

    real = learner.policy_objective_grad
    calls = []

    def poisoned(e, params, eta):
        calls.append(1)
        g = real(e, params, eta)
        return g * np.nan if len(calls) == 3 else g

    monkeypatch.setattr(learner, "policy_objective_grad", poisoned)
    with pytest.raises(TrainingDiverged, match="episode 3: nonfinite policy gradient"):
        vanilla_pg_train(_tiny(), LearnerConfig(episodes=20), 0)


def test_options_run(tmp_path):
    cfg = LearnerConfig(policy_step=0.3, meta_step=0.5, meta_decay=0.5, meta_sign="ascent",
                        reuse_e_prime=True, episodes=30, checkpoint_every=10,
                        checkpoint_dir=str(tmp_path))
    seen = []
    _, m = mgpg_train(_tiny(), cfg, 2, on_episode=seen.append)
    assert [r["episode"] for r in seen] == list(range(1, 31))
    assert set(seen[0]) == {"episode", "utility_e", "utility_e_prime", "eta", "grad_norm"}
    ck = sorted(tmp_path.glob("checkpoint_*.json"))
    assert [p.name for p in ck] == ["checkpoint_000010.json", "checkpoint_000020.json",
                                    "checkpoint_000030.json"]
    rec = json.loads(ck[-1].read_text())
    assert rec["episode"] == 30 and rec["eta"] == m.eta[-1]
    # with reuse, the next episode trains on the previous validation rollout
    assert m.utility[1:] == m.utility_prime[:-1]


@pytest.mark.parametrize("kw", [dict(policy_step=0.0), dict(meta_step=-1.0), dict(eta_init=1.5),
                                dict(eta_bounds=(0.5, 0.2)), dict(meta_decay=2.0),
                                dict(meta_sign="sideways"), dict(episodes=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        LearnerConfig(**kw)


def test_single_cluster_pg_learns_to_visit():
    users = [(0, 0.0, 0.5)] * 6 + [(0, 40.0, 0.5)] * 4
    R = build([(300.0, 0.0)], users, horizon=60.0)
    best_traj, best = mdp.enumerate_optimal(R)
    assert best_traj == [0] and best == pytest.approx(0.6)
    params, m = vanilla_pg_train(R, LearnerConfig(policy_step=0.5, eta_init=0.9, episodes=300), 0)
    assert greedy_utility(params, R) == pytest.approx(best)
    assert np.mean(m.utility[-50:]) > 0.55


def test_two_cluster_trend_pg_not_above_mgpg():
    spec = checks.desk_scenario()
    mg_cfg = checks.desk_learner(2000)
    pg_cfg = dataclasses.replace(mg_cfg, meta_step=0.0)
    mg, pg = [], []
    for s in range(30):
        R = generate_realization(spec, s)
        mg.append(greedy_utility(mgpg_train(R, mg_cfg, s)[0], R))
        pg.append(greedy_utility(vanilla_pg_train(R, pg_cfg, s)[0], R))
    print(f"2-cluster toy, 30 seeds: MGPG mean {np.mean(mg):.4f}, PG mean {np.mean(pg):.4f}")
    assert np.mean(pg) <= np.mean(mg)
