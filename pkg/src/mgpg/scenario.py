"""Physical world of the drone base station: clusters, requests, channel, timing.

A :class:`Realization` is one seeded draw of every user's request epoch, request
size and fading gain on top of a fixed geometry.  Everything downstream (the
decision process, the enumerator, the learners) reads realizations and never
mutates them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

ORIGIN = -1


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    tx_power_dbm: float = 20.0
    noise_dbm: float = -104.0
    path_loss_exp: float = 2.0
    nakagami_m: float = 3.0
    rb_bandwidth_hz: float = 20e6
    num_rbs: int = 100

    def __post_init__(self):
        if not self.nakagami_m >= 0.5:
            raise ScenarioError(f"nakagami_m must be >= 0.5, got {self.nakagami_m}")
        if not self.rb_bandwidth_hz > 0:
            raise ScenarioError("rb_bandwidth_hz must be positive")
        if int(self.num_rbs) < 1:
            raise ScenarioError("num_rbs must be >= 1")

    @property
    def snr_scale(self) -> float:
        """P / sigma^2 as a linear ratio (both levels in dBm)."""
        return 10.0 ** ((self.tx_power_dbm - self.noise_dbm) / 10.0)


@dataclass(frozen=True)
class Geometry:
    cluster_positions: tuple
    origin: tuple = (500.0, 500.0)
    altitude_m: float = 100.0
    service_radius_m: float = 20.0
    speed_mps: float = 30.0
    horizon_s: float = 400.0

    def __post_init__(self):
        pos = tuple(tuple(float(c) for c in p) for p in self.cluster_positions)
        object.__setattr__(self, "cluster_positions", pos)
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        if len(pos) < 1:
            raise ScenarioError("need at least one cluster")
        if not self.altitude_m > self.service_radius_m:
            raise ScenarioError("altitude_m must exceed service_radius_m")
        if not self.speed_mps > 0 or not self.horizon_s > 0:
            raise ScenarioError("speed_mps and horizon_s must be positive")
        pts = np.array(pos + (self.origin,), dtype=float)
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if not np.all(np.isfinite(dist)):
            raise ScenarioError("cluster distances must be finite")
        dist.setflags(write=False)
        object.__setattr__(self, "_dist", dist)

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_positions)

    def distance(self, a: int, b: int) -> float:
        """Ground distance between two locations; ``ORIGIN`` is accepted for either."""
        return float(self._dist[a, b])  # ORIGIN == -1 indexes the last row

    def travel_time(self, a: int, b: int) -> float:
        return float(self._dist[a, b]) / self.speed_mps

    @property
    def traverse_time(self) -> float:
        """Straight-and-level crossing of a service area, 2 d_r / V."""
        return 2.0 * self.service_radius_m / self.speed_mps


@dataclass(frozen=True)
class UserRequest:
    user_id: int
    cluster_id: int
    ground_offset: tuple
    bits: float
    request_time_s: float
    fading_gain: float


@dataclass
class ScenarioSpec:
    """Everything needed to draw realizations.

    ``cluster_positions`` may be given explicitly; otherwise they are placed
    uniformly in the area with ``geometry_seed`` so that every realization of
    one spec shares the same map.
    """

    num_users: int = 100
    num_clusters: int = 6
    area_m: tuple = (1000.0, 1000.0)
    origin: tuple | None = None
    cluster_positions: list | None = None
    cluster_weights: list | None = None
    geometry_seed: int = 0
    min_cluster_separation_m: float = 150.0
    altitude_m: float = 100.0
    service_radius_m: float = 20.0
    speed_mps: float = 30.0
    horizon_s: float = 400.0
    request_time: dict = field(default_factory=lambda: {"kind": "uniform", "low": 0.0, "high": None})
    bits: dict = field(default_factory=lambda: {"kind": "uniform", "low": 1e7, "high": 1e9})
    channel: dict = field(default_factory=dict)

    def validate(self) -> None:
        if int(self.num_users) < 1:
            raise ScenarioError("num_users must be >= 1")
        if self.cluster_positions is not None:
            if len(self.cluster_positions) != self.num_clusters:
                raise ScenarioError("cluster_positions length must equal num_clusters")
        if int(self.num_clusters) < 1:
            raise ScenarioError("num_clusters must be >= 1")
        if self.cluster_weights is not None:
            w = np.asarray(self.cluster_weights, dtype=float)
            if w.shape != (self.num_clusters,) or np.any(w < 0) or w.sum() <= 0:
                raise ScenarioError("cluster_weights must be nonnegative, one per cluster, not all zero")
        lo, hi = self._time_window()
        if not hi > lo:
            raise ScenarioError(f"request_time window [{lo}, {hi}] is empty")
        if self.request_time.get("kind", "uniform") != "uniform":
            raise ScenarioError(f"unknown request_time kind {self.request_time.get('kind')!r}")
        kind = self.bits.get("kind", "uniform")
        if kind != "uniform":
            raise ScenarioError(f"unknown bits kind {kind!r}")
        if not (0 < float(self.bits["low"]) <= float(self.bits["high"])):
            raise ScenarioError("bits distribution needs 0 < low <= high")

    def _time_window(self) -> tuple[float, float]:
        lo = float(self.request_time.get("low", 0.0))
        hi = self.request_time.get("high")
        hi = float(self.horizon_s) if hi is None else float(hi)
        return lo, hi

    def channel_params(self) -> ChannelParams:
        kw = dict(self.channel)
        kw.setdefault("num_rbs", self.num_users)
        return ChannelParams(**kw)

    def geometry(self) -> Geometry:
        origin = self.origin
        if origin is None:
            origin = (self.area_m[0] / 2.0, self.area_m[1] / 2.0)
        if self.cluster_positions is not None:
            positions = [tuple(p) for p in self.cluster_positions]
        else:
            positions = _place_clusters(self.num_clusters, self.area_m, origin,
                                        self.min_cluster_separation_m, self.geometry_seed)
        return Geometry(tuple(positions), tuple(origin), self.altitude_m,
                        self.service_radius_m, self.speed_mps, self.horizon_s)

    def to_dict(self) -> dict:
        return asdict(self)


def _place_clusters(n, area, origin, min_sep, seed):
    rng = np.random.default_rng(seed)
    pts: list[tuple[float, float]] = []
    for _ in range(10000):
        if len(pts) == n:
            break
        p = (float(rng.uniform(0, area[0])), float(rng.uniform(0, area[1])))
        if all(math.dist(p, q) >= min_sep for q in pts + [tuple(origin)]):
            pts.append(p)
    else:
        raise ScenarioError("could not place clusters with the requested separation")
    if len(pts) < n:
        raise ScenarioError("could not place clusters with the requested separation")
    return pts


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` users by ``weights``."""
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


class Realization:
    """One draw of user requests over a fixed geometry and channel.

    Besides the plain ``users`` list, per-cluster arrays sorted by request time
    are kept so that service can be simulated with prefix pointers: a cluster's
    served users are always its earliest requesters.
    """

    def __init__(self, geometry: Geometry, channel: ChannelParams,
                 users: Sequence[UserRequest], seed: int):
        self.geometry = geometry
        self.channel = channel
        self.users = tuple(users)
        self.seed = int(seed)
        L = geometry.num_clusters
        for u in self.users:
            if not 0 <= u.cluster_id < L:
                raise ScenarioError(f"user {u.user_id} has invalid cluster {u.cluster_id}")
        T = geometry.horizon_s
        self.num_requesting = sum(1 for u in self.users if 0.0 <= u.request_time_s <= T)
        rates = {u.user_id: user_rate(channel, geometry, u) for u in self.users}
        self.delays = {u.user_id: u.bits / rates[u.user_id] for u in self.users}
        self.cluster_times: list[np.ndarray] = []
        self.cluster_delays: list[list[float]] = []
        self.cluster_ids: list[list[int]] = []
        for l in range(L):
            members = [u for u in self.users if u.cluster_id == l and 0.0 <= u.request_time_s <= T]
            members.sort(key=lambda u: (u.request_time_s, u.user_id))
            self.cluster_times.append(np.array([u.request_time_s for u in members], dtype=float))
            self.cluster_delays.append([self.delays[u.user_id] for u in members])
            self.cluster_ids.append([u.user_id for u in members])

    @property
    def num_clusters(self) -> int:
        return self.geometry.num_clusters

    @property
    def horizon(self) -> float:
        return self.geometry.horizon_s

    def fresh_served(self) -> tuple:
        return (0,) * self.num_clusters

    def visit(self, served: tuple, cluster: int, arrival: float):
        """Serve a cluster at ``arrival``.

        Returns ``(new_served, hover_s, newly_served_ids)``.  ``served`` holds
        per-cluster counts of already served users (a prefix in request order).
        """
        if not 0 <= cluster < self.num_clusters:
            raise ScenarioError(f"invalid cluster id {cluster}")
        start = served[cluster]
        stop = int(np.searchsorted(self.cluster_times[cluster], arrival, side="right"))
        stop = min(stop, start + self.channel.num_rbs)
        if stop <= start:
            return served, 0.0, ()
        longest = max(self.cluster_delays[cluster][start:stop])
        hover = max(0.0, longest - self.geometry.traverse_time)
        new = served[:cluster] + (stop,) + served[cluster + 1:]
        return new, hover, tuple(self.cluster_ids[cluster][start:stop])

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for u in self.users:
            h.update(repr((u.user_id, u.cluster_id, u.ground_offset, u.bits,
                           u.request_time_s, u.fading_gain)).encode())
        return h.hexdigest()

    def to_records(self) -> list[dict]:
        """Line-delimited export: one header record then one record per user."""
        g = self.geometry
        head = {
            "record": "realization", "seed": self.seed,
            "geometry": {
                "cluster_positions": [list(p) for p in g.cluster_positions],
                "origin": list(g.origin), "altitude_m": g.altitude_m,
                "service_radius_m": g.service_radius_m, "speed_mps": g.speed_mps,
                "horizon_s": g.horizon_s,
            },
            "channel": asdict(self.channel),
            "num_users": len(self.users), "num_requesting": self.num_requesting,
        }
        rows = [head]
        for u in self.users:
            rec = asdict(u)
            rec["ground_offset"] = list(u.ground_offset)
            rec["record"] = "user"
            rec["delay_s"] = self.delays[u.user_id]
            rows.append(rec)
        return rows

    @classmethod
    def from_records(cls, rows: Iterable[dict]) -> "Realization":
        rows = list(rows)
        head, body = rows[0], rows[1:]
        g = head["geometry"]
        geometry = Geometry(tuple(tuple(p) for p in g["cluster_positions"]), tuple(g["origin"]),
                            g["altitude_m"], g["service_radius_m"], g["speed_mps"], g["horizon_s"])
        users = [UserRequest(r["user_id"], r["cluster_id"], tuple(r["ground_offset"]), r["bits"],
                             r["request_time_s"], r["fading_gain"]) for r in body]
        return cls(geometry, ChannelParams(**head["channel"]), users, head["seed"])


def generate_realization(spec: ScenarioSpec, seed: int) -> Realization:
    spec.validate()
    geometry = spec.geometry()
    channel = spec.channel_params()
    rng = np.random.default_rng(seed)
    U, L = int(spec.num_users), int(spec.num_clusters)
    weights = np.ones(L) if spec.cluster_weights is None else np.asarray(spec.cluster_weights, float)
    counts = _apportion(U, weights)
    cluster_of = np.repeat(np.arange(L), counts)
    t_lo, t_hi = spec._time_window()
    T = geometry.horizon_s
    # a draw with nobody requesting inside [0, T] is degenerate; redraw
    for _ in range(1000):
        radius = geometry.service_radius_m * np.sqrt(rng.uniform(0.0, 1.0, U))
        angle = rng.uniform(0.0, 2 * np.pi, U)
        bits = rng.uniform(float(spec.bits["low"]), float(spec.bits["high"]), U)
        times = rng.uniform(t_lo, t_hi, U)
        fading = rng.gamma(channel.nakagami_m, 1.0 / channel.nakagami_m, U)
        if np.any((times >= 0.0) & (times <= T)):
            break
    else:
        raise ScenarioError("request distribution never produces a request inside [0, T]")
    users = [
        UserRequest(i, int(cluster_of[i]),
                    (float(radius[i] * np.cos(angle[i])), float(radius[i] * np.sin(angle[i]))),
                    float(bits[i]), float(times[i]), float(fading[i]))
        for i in range(U)
    ]
    return Realization(geometry, channel, users, seed)


def user_rate(channel: ChannelParams, geometry: Geometry, user: UserRequest) -> float:
    """Uplink rate in bit/s while the drone is over the user's cluster."""
    dx, dy = user.ground_offset
    d = math.sqrt(geometry.altitude_m ** 2 + dx * dx + dy * dy)
    snr = channel.snr_scale * user.fading_gain * d ** (-channel.path_loss_exp)
    return channel.rb_bandwidth_hz * math.log2(1.0 + snr)


def hover_time(realization: Realization, cluster_id: int, arrival_time_s: float,
               served: tuple | None = None) -> float:
    if served is None:
        served = realization.fresh_served()
    return realization.visit(served, cluster_id, arrival_time_s)[1]


@dataclass(frozen=True)
class Visit:
    cluster: int
    arrival_s: float
    hover_s: float
    departure_s: float
    remaining_s: float
    served_ids: tuple


def trajectory_schedule(realization: Realization, trajectory: Sequence[int]) -> list[Visit]:
    """Walk a cluster sequence from the origin, tracking the remaining budget tau_k."""
    g = realization.geometry
    tau = g.horizon_s
    served = realization.fresh_served()
    here = ORIGIN
    out = []
    for l in trajectory:
        tau -= g.travel_time(here, l)
        arrival = g.horizon_s - tau
        served, hover, ids = realization.visit(served, l, arrival)
        tau -= hover
        out.append(Visit(l, arrival, hover, g.horizon_s - tau, tau, ids))
        here = l
    return out


def trajectory_time(realization: Realization, trajectory: Sequence[int]) -> float:
    """Return-to-origin epoch t_0: all leg flight times plus hover times."""
    if len(trajectory) == 0:
        return 0.0
    g = realization.geometry
    stops = [ORIGIN, *trajectory, ORIGIN]
    flight = sum(g.distance(a, b) for a, b in zip(stops, stops[1:])) / g.speed_mps
    hovers = sum(v.hover_s for v in trajectory_schedule(realization, trajectory))
    return flight + hovers


def success_rate(realization: Realization, trajectory: Sequence[int]) -> float:
    if realization.num_requesting == 0:
        return 0.0
    served = set()
    for v in trajectory_schedule(realization, trajectory):
        served.update(v.served_ids)
    return len(served) / realization.num_requesting
