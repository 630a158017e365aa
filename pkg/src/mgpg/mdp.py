"""Episodic decision process over a realization.

Actions are integer indices ``0..L-1`` for clusters and ``L`` for RETURN.  The
feasibility mask keeps every trajectory inside the flight-time budget, so an
episode can always be closed with RETURN and the return epoch never exceeds
the horizon.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scenario import ORIGIN, Realization


class ContractViolation(RuntimeError):
    """Raised when a caller breaks a precondition (e.g. takes an infeasible action)."""


class InstanceTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class State:
    location: int
    remaining_budget_s: float
    horizon_s: float
    served: tuple = field(default=(), compare=True)

    @property
    def at_origin(self) -> bool:
        return self.location == ORIGIN


def return_action(num_clusters: int) -> int:
    return num_clusters


def initial_state(realization: Realization) -> State:
    T = realization.horizon
    return State(ORIGIN, T, T, realization.fresh_served())


def feasible_mask(realization: Realization, state: State) -> np.ndarray:
    """Boolean mask over the L+1 actions; RETURN is always feasible.

    A cluster is allowed when flying there, hovering for its currently active
    users and flying home still fits in the remaining budget.  Staying put is
    not a move and is masked.
    """
    g = realization.geometry
    L = g.num_clusters
    mask = np.zeros(L + 1, dtype=bool)
    mask[L] = True
    tau = state.remaining_budget_s
    elapsed = state.horizon_s - tau
    for l in range(L):
        if l == state.location:
            continue
        go = g.travel_time(state.location, l)
        back = g.travel_time(l, ORIGIN)
        if go + back > tau:
            continue
        _, hover, _ = realization.visit(state.served, l, elapsed + go)
        mask[l] = go + hover + back <= tau
    return mask


def feasible_actions(realization: Realization, state: State) -> set[int]:
    return {int(a) for a in np.flatnonzero(feasible_mask(realization, state))}


def step(realization: Realization, state: State, action: int, mask: np.ndarray | None = None):
    """Apply one action; returns ``(next_state, reward, served_user_ids)``."""
    if mask is None:
        mask = feasible_mask(realization, state)
    if not (0 <= action < len(mask)) or not mask[action]:
        raise ContractViolation(f"action {action} infeasible at {state.location=} "
                                f"tau={state.remaining_budget_s:.6g}")
    g = realization.geometry
    L = g.num_clusters
    if action == L:
        tau = state.remaining_budget_s - g.travel_time(state.location, ORIGIN)
        return State(ORIGIN, tau, state.horizon_s, state.served), 0.0, ()
    go = g.travel_time(state.location, action)
    arrival = state.horizon_s - state.remaining_budget_s + go
    served, hover, ids = realization.visit(state.served, action, arrival)
    tau = state.remaining_budget_s - go - hover
    reward = len(ids) / realization.num_requesting if realization.num_requesting else 0.0
    return State(action, tau, state.horizon_s, served), reward, ids


@dataclass(frozen=True)
class Step:
    state: State
    action: int
    reward: float
    log_prob: float
    mask: np.ndarray


@dataclass
class Experience:
    steps: list
    total_utility: float

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=float)

    def trajectory(self) -> list[int]:
        L = len(self.steps[0].mask) - 1 if self.steps else 0
        return [s.action for s in self.steps if s.action != L]

    def to_records(self) -> list[dict]:
        return [{"k": k + 1, "location": s.state.location,
                 "remaining_budget_s": s.state.remaining_budget_s,
                 "action": s.action, "reward": s.reward, "log_prob": s.log_prob,
                 "feasible": [int(a) for a in np.flatnonzero(s.mask)]}
                for k, s in enumerate(self.steps)]


# A policy maps (state, feasible mask) to a probability vector over L+1 actions.
Policy = Callable[[State, np.ndarray], np.ndarray]


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    a = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    # guard against landing on a trailing zero-probability entry through rounding
    while probs[min(a, len(probs) - 1)] == 0.0 and a > 0:
        a -= 1
    return min(a, len(probs) - 1)


def rollout(realization: Realization, policy: Policy, rng: np.random.Generator | None,
            greedy: bool = False) -> Experience:
    state = initial_state(realization)
    L = realization.num_clusters
    steps = []
    total = 0.0
    while True:
        mask = feasible_mask(realization, state)
        probs = policy(state, mask)
        if greedy:
            a = int(np.argmax(np.where(mask, probs, -1.0)))
        else:
            a = _sample(probs, rng)
        p = float(probs[a])
        nxt, r, _ = step(realization, state, a, mask)
        steps.append(Step(state, a, r, math.log(p) if p > 0 else -math.inf, mask))
        total += r
        state = nxt
        if a == L:
            break
    return Experience(steps, total)


def uniform_policy(state: State, mask: np.ndarray) -> np.ndarray:
    return mask / mask.sum()


def expected_utility(realization: Realization, policy: Policy, max_paths: int = 10 ** 6) -> float:
    """Exact expected success rate of ``policy`` by walking every action path."""
    L = realization.num_clusters
    count = 0

    def walk(state, prob):
        nonlocal count
        count += 1
        if count > max_paths:
            raise InstanceTooLarge(f"more than {max_paths} paths")
        mask = feasible_mask(realization, state)
        probs = policy(state, mask)
        total = 0.0
        for a in np.flatnonzero(mask):
            pa = float(probs[a])
            if pa == 0.0 or a == L:
                continue
            nxt, r, _ = step(realization, state, int(a), mask)
            total += pa * prob * r + walk(nxt, prob * pa)
        return total

    return walk(initial_state(realization), 1.0)


def enumerate_optimal(realization: Realization, max_nodes: int = 10 ** 7,
                      max_clusters: int = 6) -> tuple[list[int], float]:
    """Exact best trajectory by depth-first branch and bound.

    The bound adds, for every cluster still reachable, the unserved users that
    could request before the latest epoch the drone could be there and still
    get home.  Raises :class:`InstanceTooLarge` past ``max_nodes`` expansions.
    """
    g = realization.geometry
    L = g.num_clusters
    if L > max_clusters:
        raise InstanceTooLarge(f"{L} clusters exceeds the enumeration limit of {max_clusters}")
    n_req = realization.num_requesting
    if n_req == 0:
        return [], 0.0
    T = g.horizon_s
    back = [g.travel_time(l, ORIGIN) for l in range(L)]
    reachable_by = [int(np.searchsorted(realization.cluster_times[l], T - back[l], side="right"))
                    for l in range(L)]
    best_traj: list[int] = []
    best_count = 0
    nodes = 0
    path: list[int] = []

    def bound(state: State, gained: int) -> int:
        tau = state.remaining_budget_s
        extra = 0
        for l in range(L):
            if l != state.location and g.travel_time(state.location, l) + back[l] > tau:
                continue
            extra += max(0, reachable_by[l] - state.served[l])
        return gained + extra

    def dfs(state: State, gained: int):
        nonlocal best_count, best_traj, nodes
        nodes += 1
        if nodes > max_nodes:
            raise InstanceTooLarge(f"search exceeded {max_nodes} nodes "
                                   f"(L={L}, T={T}); best so far {best_count}/{n_req}")
        if gained > best_count:
            best_count, best_traj = gained, list(path)
        if bound(state, gained) <= best_count:
            return
        mask = feasible_mask(realization, state)
        for a in range(L):
            if not mask[a]:
                continue
            nxt, _, ids = step(realization, state, a, mask)
            path.append(a)
            dfs(nxt, gained + len(ids))
            path.pop()

    dfs(initial_state(realization), 0)
    return best_traj, best_count / n_req
