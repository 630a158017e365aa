"""One-hidden-layer softmax policy with exact, hand-written score gradients.

Input: one-hot location over the L clusters plus the origin, then tau / T.
Hidden: ``tanh`` (bounded, so logits are bounded by the output weights).
Output: L+1 logits (clusters, then RETURN) through a masked softmax.

Parameters live in one flat vector laid out as ``W1 | b1 | W2 | b2`` with
``W1`` of shape (hidden, in) and ``W2`` of shape (out, hidden).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import State
from .scenario import ORIGIN

FORMAT_VERSION = 1


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    in_dim: int
    hidden: int
    out_dim: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.size(self.in_dim, self.hidden, self.out_dim),):
            raise ValueError(f"theta has shape {theta.shape}, architecture needs "
                             f"{self.size(self.in_dim, self.hidden, self.out_dim)}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has nonfinite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @staticmethod
    def size(in_dim: int, hidden: int, out_dim: int) -> int:
        return (in_dim + 1) * hidden + (hidden + 1) * out_dim

    @property
    def num_clusters(self) -> int:
        return self.out_dim - 1

    def unpack(self):
        i, h, o = self.in_dim, self.hidden, self.out_dim
        t = self.theta
        a = h * i
        W1 = t[:a].reshape(h, i)
        b1 = t[a:a + h]
        W2 = t[a + h:a + h + o * h].reshape(o, h)
        b2 = t[a + h + o * h:]
        return W1, b1, W2, b2

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.in_dim, self.hidden, self.out_dim)


def init_params(num_clusters: int, rng: np.random.Generator, hidden: int = 32,
                scale: float = 0.05) -> PolicyParams:
    in_dim, out_dim = num_clusters + 2, num_clusters + 1
    W1 = rng.uniform(-scale, scale, (hidden, in_dim))
    W2 = rng.uniform(-scale, scale, (out_dim, hidden))
    theta = np.concatenate([W1.ravel(), np.zeros(hidden), W2.ravel(), np.zeros(out_dim)])
    return PolicyParams(theta, in_dim, hidden, out_dim)


def zeros_like(params: PolicyParams) -> PolicyParams:
    return params.with_theta(np.zeros_like(params.theta))


def _features(location: int, tau: float, horizon: float, num_clusters: int) -> np.ndarray:
    x = np.zeros(num_clusters + 2)
    x[num_clusters if location == ORIGIN else location] = 1.0
    x[-1] = tau / horizon
    return x


def encode_state(state: State, geometry) -> np.ndarray:
    L = geometry if isinstance(geometry, int) else geometry.num_clusters
    return _features(state.location, state.remaining_budget_s, state.horizon_s, L)


def logits(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    W1, b1, W2, b2 = params.unpack()
    return W2 @ np.tanh(W1 @ x + b1) + b2


def logit_bound(params: PolicyParams) -> float:
    """Largest attainable |logit|: tanh units are bounded by 1."""
    _, _, W2, b2 = params.unpack()
    return float(np.max(np.abs(b2) + np.abs(W2).sum(axis=1)))


def masked_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        raise ValueError("mask excludes every action")
    z = np.where(mask, z, -np.inf)
    e = np.exp(z - z[mask].max())
    return e / e.sum(axis=-1, keepdims=True)


def action_probs(params: PolicyParams, state: State, feasible_mask: np.ndarray) -> np.ndarray:
    x = _features(state.location, state.remaining_budget_s, state.horizon_s, params.num_clusters)
    return masked_softmax(logits(params, x), np.asarray(feasible_mask, dtype=bool))


def grad_log_prob(params: PolicyParams, state: State, feasible_mask: np.ndarray,
                  action: int) -> np.ndarray:
    x = encode_state(state, params.num_clusters)[None, :]
    return weighted_score(params, x, np.asarray(feasible_mask, bool)[None, :],
                          np.array([action]), np.ones(1))


def weighted_score(params: PolicyParams, X: np.ndarray, masks: np.ndarray,
                   actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_k w_k * grad log pi(a_k | x_k), one backward pass over the batch."""
    W1, b1, W2, b2 = params.unpack()
    H = np.tanh(X @ W1.T + b1)
    Z = H @ W2.T + b2
    Z = np.where(masks, Z, -np.inf)
    P = np.exp(Z - Z.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    # d log p_a / d z = onehot(a) - p ; zero on masked entries since p is zero there
    D = -P
    D[np.arange(len(actions)), actions] += 1.0
    D *= np.asarray(weights, float)[:, None]
    gW2 = D.T @ H
    gb2 = D.sum(axis=0)
    D1 = (D @ W2) * (1.0 - H * H)
    gW1 = D1.T @ X
    gb1 = D1.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def axpy_update(params: PolicyParams, direction: np.ndarray, step: float) -> PolicyParams:
    direction = np.asarray(direction, dtype=float)
    if direction.shape != params.theta.shape:
        raise ValueError(f"direction shape {direction.shape} != params shape {params.theta.shape}")
    if not np.isfinite(step):
        raise ValueError("step must be finite")
    return params.with_theta(params.theta + step * direction)


class SoftmaxPolicy:
    """Callable adapter so a parameter snapshot can drive :func:`mdp.rollout`."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self._W1, self._b1, self._W2, self._b2 = params.unpack()
        self._L = params.num_clusters

    def __call__(self, state: State, mask: np.ndarray) -> np.ndarray:
        x = _features(state.location, state.remaining_budget_s, state.horizon_s, self._L)
        z = self._W2 @ np.tanh(self._W1 @ x + self._b1) + self._b2
        return masked_softmax(z, mask)


def save_params(params: PolicyParams, path) -> None:
    header = (f"mgpg-policy v{FORMAT_VERSION} in={params.in_dim} "
              f"hidden={params.hidden} out={params.out_dim} n={params.theta.size}")
    np.savetxt(path, params.theta, fmt="%.17g", header=header)


def load_params(path) -> PolicyParams:
    with open(path) as f:
        head = f.readline().lstrip("# ").split()
    if len(head) < 2 or head[0] != "mgpg-policy":
        raise ValueError(f"{path}: not a policy parameter file")
    if head[1] != f"v{FORMAT_VERSION}":
        raise ValueError(f"{path}: unsupported format version {head[1]}")
    meta = dict(kv.split("=") for kv in head[2:])
    theta = np.atleast_1d(np.loadtxt(Path(path), dtype=float))
    if theta.size != int(meta["n"]):
        raise ValueError(f"{path}: expected {meta['n']} values, found {theta.size}")
    return PolicyParams(theta, int(meta["in"]), int(meta["hidden"]), int(meta["out"]))
