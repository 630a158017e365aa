"""Finite-difference gradient checks and the small-instance optimality check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mdp
from .learner import LearnerConfig, mgpg_train, meta_grad, objective, policy_objective_grad
from .policy import PolicyParams, SoftmaxPolicy, axpy_update, init_params
from .scenario import ScenarioSpec, generate_realization

FD_STEP_THETA = 1e-6
FD_STEP_ETA = 1e-5


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish.

    Elementwise ratios on coordinates whose gradient is ~1e-7 would measure the
    difference quotient's own roundoff (~eps*|J|/h), not the analytic gradient.
    """
    a = np.atleast_1d(np.asarray(analytic, float))
    n = np.atleast_1d(np.asarray(numeric, float))
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0


def tiny_scenario(num_clusters: int = 3, num_users: int = 12, horizon_s: float = 120.0) -> ScenarioSpec:
    return ScenarioSpec(num_users=num_users, num_clusters=num_clusters, area_m=(600.0, 600.0),
                        horizon_s=horizon_s, min_cluster_separation_m=100.0,
                        request_time={"kind": "uniform", "low": 0.0, "high": horizon_s})


def random_configuration(rng: np.random.Generator, min_steps: int = 2):
    """A random (params, experience, eta) triple on a small instance.

    Parameters are drawn wider than the training init so probabilities are far
    from uniform and every layer carries gradient.
    """
    while True:
        L = int(rng.integers(2, 5))
        spec = tiny_scenario(L, int(rng.integers(6, 16)), float(rng.uniform(80, 200)))
        spec.geometry_seed = int(rng.integers(0, 2 ** 31))
        real = generate_realization(spec, int(rng.integers(0, 2 ** 31)))
        params = init_params(L, rng, hidden=int(rng.integers(4, 17)), scale=0.8)
        params = params.with_theta(params.theta + rng.normal(0, 0.3, params.theta.size))
        exp = mdp.rollout(real, SoftmaxPolicy(params), rng)
        if len(exp) >= min_steps and exp.total_utility > 0:
            return params, exp, float(rng.uniform(0.05, 0.95)), real


def policy_grad_error(params: PolicyParams, experience, eta: float, coords: np.ndarray,
                      h: float = FD_STEP_THETA) -> float:
    g = policy_objective_grad(experience, params, eta)
    fd = np.empty(len(coords))
    for j, c in enumerate(coords):
        tp = params.theta.copy()
        tm = params.theta.copy()
        tp[c] += h
        tm[c] -= h
        fd[j] = (objective(experience, params.with_theta(tp), eta)
                 - objective(experience, params.with_theta(tm), eta)) / (2 * h)
    return rel_error(g[coords], fd)


def meta_grad_error(params: PolicyParams, e, eta: float, realization, rng, alpha: float,
                    h: float = FD_STEP_ETA, eta_tilde: float = 1.0) -> tuple[float, float]:
    """Compare meta_grad with d/d eta of J~(eta_tilde, theta + alpha * grad J(eta, theta)).

    ``e'`` is drawn once under the updated parameters and then held fixed.
    """
    new = axpy_update(params, policy_objective_grad(e, params, eta), alpha)
    e2 = mdp.rollout(realization, SoftmaxPolicy(new), rng)

    def validation(eta_):
        theta_new = axpy_update(params, policy_objective_grad(e, params, eta_), alpha)
        return objective(e2, theta_new, eta_tilde)

    fd = (validation(eta + h) - validation(eta - h)) / (2 * h)
    analytic = meta_grad(e, params, eta, e2, new, alpha, eta_tilde)
    return rel_error(analytic, fd), analytic


def run_policy_gradcheck(seed: int, configs: int = 100, coords: int = 64) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(configs):
        params, exp, eta, _ = random_configuration(rng)
        n = params.theta.size
        pick = rng.choice(n, size=min(coords, n), replace=False)
        worst = max(worst, policy_grad_error(params, exp, eta, pick))
    return worst


def run_meta_gradcheck(seed: int, configs: int = 50) -> float:
    rng = np.random.default_rng(seed + 7919)
    worst = 0.0
    done = 0
    while done < configs:
        params, exp, eta, real = random_configuration(rng)
        err, analytic = meta_grad_error(params, exp, eta, real, rng, float(rng.uniform(0.05, 0.5)))
        if analytic == 0.0:
            continue  # e' earned nothing; the check would be vacuous
        worst = max(worst, err)
        done += 1
    return worst


def desk_scenario() -> ScenarioSpec:
    """Two clusters 300 m either side of the origin, 100 users, 95 s budget."""
    return ScenarioSpec(num_users=100, num_clusters=2, area_m=(1000.0, 1000.0),
                        origin=(500.0, 500.0), cluster_positions=[[200.0, 500.0], [800.0, 500.0]],
                        cluster_weights=[0.6, 0.4], horizon_s=95.0,
                        request_time={"kind": "uniform", "low": 0.0, "high": 95.0})


def desk_learner(episodes: int = 2000) -> LearnerConfig:
    return LearnerConfig(policy_step=0.05, meta_step=0.1, eta_init=0.999, episodes=episodes)


@dataclass
class OracleRow:
    seed: int
    optimal: float
    learned: float
    trajectory: list

    @property
    def within(self) -> bool:
        return self.learned >= 0.95 * self.optimal - 1e-12


def oracle_check(seeds, config: LearnerConfig | None = None, spec: ScenarioSpec | None = None):
    """Train MGPG on one realization per seed and compare its greedy tour with the optimum."""
    spec = spec or desk_scenario()
    config = config or desk_learner()
    rows = []
    for s in seeds:
        real = generate_realization(spec, s)
        _, best = mdp.enumerate_optimal(real)
        params, _ = mgpg_train(real, config, s)
        exp = mdp.rollout(real, SoftmaxPolicy(params), None, greedy=True)
        rows.append(OracleRow(s, best, exp.total_utility, exp.trajectory()))
    return rows
