"""Policy-gradient training with and without online meta-gradient tuning of the discount.

Per episode the meta-gradient learner

1. rolls out ``e`` under the current parameters,
2. takes one policy-gradient step with discount ``eta``,
3. rolls out ``e'`` under the updated parameters,
4. moves ``eta`` along the derivative of the undiscounted objective on ``e'``
   taken through the policy step.

With ``meta_decay == 0`` the derivative collapses to
``policy_step * <sum_k' A_k' x_k', sum_k B_k y_k>`` where ``A`` are suffix sums
of ``e'`` rewards, ``B`` the eta-derivatives of the discounted returns of ``e``,
and ``x``/``y`` the score vectors under the new/old parameters.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import mdp
from .policy import (PolicyParams, SoftmaxPolicy, action_probs, axpy_update, encode_state,
                     init_params, weighted_score)
from .scenario import Realization

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LearnerConfig:
    policy_step: float = 0.01
    meta_step: float = 0.001
    eta_init: float = 0.9
    eta_tilde: float = 1.0
    meta_decay: float = 0.0
    episodes: int = 1000
    eta_bounds: tuple = (0.01, 0.999)
    # "descent" applies eta <- eta - beta * grad, "ascent" flips the sign
    meta_sign: str = "descent"
    reuse_e_prime: bool = False
    hidden: int = 32
    init_scale: float = 0.05
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.eta_bounds = tuple(float(b) for b in self.eta_bounds)
        lo, hi = self.eta_bounds
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"eta_bounds {self.eta_bounds} must lie in [0, 1]")
        if not self.policy_step > 0:
            raise ValueError("policy_step must be positive")
        if not self.meta_step >= 0:
            raise ValueError("meta_step must be nonnegative")
        if not lo <= self.eta_init <= hi:
            raise ValueError(f"eta_init {self.eta_init} outside eta_bounds {self.eta_bounds}")
        if not 0.0 <= self.meta_decay <= 1.0:
            raise ValueError("meta_decay must lie in [0, 1]")
        if self.meta_sign not in ("descent", "ascent"):
            raise ValueError(f"meta_sign must be 'descent' or 'ascent', got {self.meta_sign!r}")
        if int(self.episodes) < 0:
            raise ValueError("episodes must be >= 0")

    def clamp(self, eta: float) -> float:
        lo, hi = self.eta_bounds
        return min(max(eta, lo), hi)


@dataclass
class RunMetrics:
    utility: list = field(default_factory=list)
    utility_prime: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    meta_grad: list = field(default_factory=list)
    episodes_to_converge: int | None = None
    converged: bool | None = None
    final_utility: float | None = None

    def record(self, **kw):
        for k, v in kw.items():
            getattr(self, k).append(v)

    def to_records(self) -> list[dict]:
        return [{"episode": i + 1, "utility_e": self.utility[i],
                 "utility_e_prime": self.utility_prime[i], "eta": self.eta[i],
                 "grad_norm": self.grad_norm[i]}
                for i in range(len(self.utility))]


def returns(rewards: Sequence[float], eta: float) -> np.ndarray:
    """Discounted suffix sums G_k = r_k + eta * G_{k+1}."""
    r = np.asarray(rewards, dtype=float)
    G = np.empty_like(r)
    acc = 0.0
    for k in range(len(r) - 1, -1, -1):
        acc = r[k] + eta * acc
        G[k] = acc
    return G


def return_eta_derivative(rewards: Sequence[float], eta: float) -> np.ndarray:
    """dG_k/d eta = sum_{j>=k} (j-k) eta^(j-k-1) r_j, via B_k = G_{k+1} + eta * B_{k+1}."""
    r = np.asarray(rewards, dtype=float)
    B = np.zeros_like(r)
    g_next = 0.0
    b_next = 0.0
    for k in range(len(r) - 1, -1, -1):
        B[k] = g_next + eta * b_next
        g_next = r[k] + eta * g_next
        b_next = B[k]
    return B


def _batch(experience: mdp.Experience, num_clusters: int):
    X = np.array([encode_state(s.state, num_clusters) for s in experience.steps])
    masks = np.array([s.mask for s in experience.steps], dtype=bool)
    actions = np.array([s.action for s in experience.steps], dtype=int)
    return X, masks, actions


def score_sum(experience: mdp.Experience, params: PolicyParams, weights) -> np.ndarray:
    if not experience.steps:
        return np.zeros_like(params.theta)
    X, M, A = _batch(experience, params.num_clusters)
    return weighted_score(params, X, M, A, weights)


def policy_objective_grad(experience: mdp.Experience, params: PolicyParams, eta: float) -> np.ndarray:
    return score_sum(experience, params, returns(experience.rewards, eta))


def objective(experience: mdp.Experience, params: PolicyParams, eta: float) -> float:
    """J(eta, theta) = sum_k G_k(eta) log pi_theta(a_k | s_k) on a fixed experience."""
    G = returns(experience.rewards, eta)
    total = 0.0
    for g, s in zip(G, experience.steps):
        total += g * math.log(action_probs(params, s.state, s.mask)[s.action])
    return total


def meta_direction(experience_e: mdp.Experience, params_old: PolicyParams, eta: float) -> np.ndarray:
    """sum_k B_k y_k: derivative of the policy gradient with respect to eta."""
    return score_sum(experience_e, params_old, return_eta_derivative(experience_e.rewards, eta))


def validation_grad(experience_e_prime: mdp.Experience, params_new: PolicyParams,
                    eta_tilde: float = 1.0) -> np.ndarray:
    """sum_k' A_k' x_k' with A the eta_tilde-discounted returns of e'."""
    return score_sum(experience_e_prime, params_new, returns(experience_e_prime.rewards, eta_tilde))


def meta_grad(experience_e: mdp.Experience, params_old: PolicyParams, eta: float,
              experience_e_prime: mdp.Experience, params_new: PolicyParams,
              policy_step: float, eta_tilde: float = 1.0) -> float:
    u = validation_grad(experience_e_prime, params_new, eta_tilde)
    v = meta_direction(experience_e, params_old, eta)
    return float(policy_step * (u @ v))


def as_stream(realizations) -> Callable[[int], Realization]:
    """Normalize a fixed realization, a sequence (cycled) or a callable ``i -> Realization``."""
    if isinstance(realizations, Realization):
        return lambda i: realizations
    if callable(realizations):
        return realizations
    seq = list(realizations)
    if not seq:
        raise ValueError("empty realization stream")
    return lambda i: seq[i % len(seq)]


def _rngs(seed: int):
    init_ss, e_ss, e2_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(e_ss),
            np.random.default_rng(e2_ss))


def _checkpoint(config: LearnerConfig, params: PolicyParams, eta: float, episode: int):
    if not config.checkpoint_every or not config.checkpoint_dir:
        return
    if episode % config.checkpoint_every:
        return
    out = Path(config.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {"episode": episode, "eta": eta, "in": params.in_dim, "hidden": params.hidden,
           "out": params.out_dim, "theta": params.theta.tolist()}
    (out / f"checkpoint_{episode:06d}.json").write_text(json.dumps(rec))


def _check_finite(i: int, name: str, value) -> None:
    ok = np.isfinite(value)
    if not np.all(ok):
        bad = np.size(ok) - int(np.count_nonzero(ok))
        raise TrainingDiverged(f"episode {i + 1}: nonfinite {name} "
                               f"({bad} of {np.size(ok)} entries nan/inf)")


def _train(realization_stream, config: LearnerConfig, seed: int, meta: bool,
           on_episode: Callable[[dict], None] | None = None):
    stream = as_stream(realization_stream)
    init_rng, rng_e, rng_e2 = _rngs(seed)
    L = stream(0).num_clusters
    params = init_params(L, init_rng, config.hidden, config.init_scale)
    eta = config.eta_init
    metrics = RunMetrics()
    sign = 1.0 if config.meta_sign == "descent" else -1.0
    trace = np.zeros_like(params.theta)
    carried = None
    for i in range(int(config.episodes)):
        R = stream(i)
        if carried is not None:
            e = carried
        else:
            e = mdp.rollout(R, SoftmaxPolicy(params), rng_e)
        g = policy_objective_grad(e, params, eta)
        _check_finite(i, "policy gradient", g)
        _check_finite(i, "parameters", params.theta + config.policy_step * g)
        new = axpy_update(params, g, config.policy_step)
        u_prime = math.nan
        mg = math.nan
        if meta:
            e2 = mdp.rollout(R, SoftmaxPolicy(new), rng_e2)
            u_prime = e2.total_utility
            # d theta_new / d eta, with older contributions decayed by meta_decay
            trace = config.meta_decay * trace + config.policy_step * meta_direction(e, params, eta)
            mg = float(validation_grad(e2, new, config.eta_tilde) @ trace)
            _check_finite(i, "meta-gradient", mg)
            eta = config.clamp(eta - sign * config.meta_step * mg)
            carried = e2 if config.reuse_e_prime else None
        params = new
        metrics.record(utility=e.total_utility, utility_prime=u_prime, eta=eta,
                       grad_norm=float(np.linalg.norm(g)), meta_grad=mg)
        _checkpoint(config, params, eta, i + 1)
        if on_episode is not None:
            on_episode({"episode": i + 1, "utility_e": e.total_utility,
                        "utility_e_prime": u_prime, "eta": eta,
                        "grad_norm": metrics.grad_norm[-1]})
    return params, metrics


def mgpg_train(realization_stream, config: LearnerConfig, seed: int,
               on_episode: Callable[[dict], None] | None = None):
    """Meta-gradient policy gradient; returns ``(params, metrics)``."""
    return _train(realization_stream, config, seed, meta=True, on_episode=on_episode)


def vanilla_pg_train(realization_stream, config: LearnerConfig, seed: int,
                     on_episode: Callable[[dict], None] | None = None):
    """Fixed-discount policy gradient sharing the same seed layout as :func:`mgpg_train`.

    Initial parameters and the training rollouts draw from the same generators
    in both learners, so ``meta_step=0`` reproduces this run bit for bit; the
    extra validation rollouts of the meta learner use their own generator.
    """
    return _train(realization_stream, config, seed, meta=False, on_episode=on_episode)


def greedy_utility(params: PolicyParams, realization: Realization) -> float:
    return mdp.rollout(realization, SoftmaxPolicy(params), None, greedy=True).total_utility


def config_from_dict(d: dict) -> LearnerConfig:
    known = {f for f in LearnerConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise KeyError(sorted(unknown)[0])
    return LearnerConfig(**d)


def config_to_dict(c: LearnerConfig) -> dict:
    d = asdict(c)
    d["eta_bounds"] = list(c.eta_bounds)
    return d
