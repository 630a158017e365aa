"""YAML config loading with key-path error reporting.

Scenario file schema (all keys optional, defaults from :class:`ScenarioSpec`)::

    num_users: 100
    num_clusters: 6
    area_m: [1000, 1000]
    origin: [500, 500]            # default: area centre
    cluster_positions: [[x, y], ...]   # default: placed with geometry_seed
    cluster_weights: [..]         # share of users per cluster
    geometry_seed: 0
    altitude_m: 100
    service_radius_m: 20
    speed_mps: 30
    horizon_s: 400
    request_time: {kind: uniform, low: 0, high: 400}
    bits: {kind: uniform, low: 1.0e7, high: 1.0e9}
    channel: {tx_power_dbm: 20, noise_dbm: -104, path_loss_exp: 2,
              nakagami_m: 3, rb_bandwidth_hz: 2.0e7, num_rbs: 100}

Experiment file schema::

    scenario: {...}  or  scenario_file: path/relative/to/this/file.yaml
    arms:
      - {name: mgpg, algorithm: mgpg, learner: {...LearnerConfig fields...}}
      - {name: pg, algorithm: pg, learner: {...}}
    seeds: [0, 1, 2]          # or {start: 0, count: 30}
    protocol: {kind: unseen, train_per_seed: 4, train_base: 0,
               heldout: [100000, 100001]}
    evaluation: {mode: greedy, rollouts: 1}
    convergence: {window: 50, fraction: 0.95}
    output_dir: out
    workers: 1
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .learner import LearnerConfig
from .scenario import ChannelParams, ScenarioError, ScenarioSpec


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.key_path = path


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(d, allowed: set[str], where: str):
    if not isinstance(d, dict):
        raise ConfigError(where or "<root>", f"expected a mapping, got {type(d).__name__}")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{where}.{k}" if where else str(k), "unknown key")


def scenario_from_dict(d: dict, where: str = "scenario") -> ScenarioSpec:
    _check_keys(d, _fields(ScenarioSpec), where)
    if "channel" in d:
        _check_keys(d["channel"], _fields(ChannelParams), f"{where}.channel")
    for key in ("request_time", "bits"):
        if key in d:
            _check_keys(d[key], {"kind", "low", "high"}, f"{where}.{key}")
    spec = ScenarioSpec(**d)
    defaults = ScenarioSpec()
    for key in ("request_time", "bits"):
        if key in d:
            setattr(spec, key, {**getattr(defaults, key), **d[key]})
    try:
        spec.validate()
        spec.channel_params()
    except (ScenarioError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from exc
    return spec


def load_yaml(path) -> dict:
    with open(path) as f:
        data = yaml.safe_load(f)
    return {} if data is None else data


def load_scenario(path) -> ScenarioSpec:
    return scenario_from_dict(load_yaml(path), where=str(Path(path).name))


def learner_from_dict(d: dict, where: str) -> LearnerConfig:
    _check_keys(d, _fields(LearnerConfig), where)
    try:
        return LearnerConfig(**d)
    except (ValueError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from exc


def experiment_from_dict(d: dict, base_dir: Path | None = None):
    from .harness import Arm, ExperimentSpec, Protocol

    allowed = {"scenario", "scenario_file", "arms", "seeds", "protocol", "evaluation",
               "convergence", "output_dir", "workers"}
    _check_keys(d, allowed, "")
    if "scenario_file" in d:
        p = Path(d["scenario_file"])
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        scenario = scenario_from_dict(load_yaml(p), where="scenario_file")
    else:
        scenario = scenario_from_dict(d.get("scenario", {}))
    arms = []
    raw_arms = d.get("arms")
    if not raw_arms:
        raise ConfigError("arms", "at least one arm is required")
    for i, a in enumerate(raw_arms):
        where = f"arms[{i}]"
        _check_keys(a, {"name", "algorithm", "learner"}, where)
        if a.get("algorithm") not in ("mgpg", "pg"):
            raise ConfigError(f"{where}.algorithm", "must be 'mgpg' or 'pg'")
        arms.append(Arm(a.get("name", a["algorithm"]), a["algorithm"],
                        learner_from_dict(a.get("learner", {}), f"{where}.learner")))
    seeds = d.get("seeds", [0])
    if isinstance(seeds, dict):
        _check_keys(seeds, {"start", "count"}, "seeds")
        seeds = list(range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"])))
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "need a nonempty list of seeds")
    prot = d.get("protocol", {})
    _check_keys(prot, _fields(Protocol), "protocol")
    try:
        protocol = Protocol(**prot)
    except (ValueError, TypeError) as exc:
        raise ConfigError("protocol", str(exc)) from exc
    ev = d.get("evaluation", {})
    _check_keys(ev, {"mode", "rollouts"}, "evaluation")
    if ev.get("mode", "greedy") not in ("greedy", "stochastic"):
        raise ConfigError("evaluation.mode", "must be 'greedy' or 'stochastic'")
    conv = d.get("convergence", {})
    _check_keys(conv, {"window", "fraction"}, "convergence")
    spec = ExperimentSpec(
        scenario=scenario, arms=arms, seeds=[int(s) for s in seeds], protocol=protocol,
        eval_mode=ev.get("mode", "greedy"), eval_rollouts=int(ev.get("rollouts", 1)),
        convergence_window=int(conv.get("window", 50)),
        convergence_fraction=float(conv.get("fraction", 0.95)),
        output_dir=d.get("output_dir", "out"), workers=int(d.get("workers", 1)),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError("protocol", str(exc)) from exc
    return spec


def load_experiment(path):
    path = Path(path)
    return experiment_from_dict(load_yaml(path), base_dir=path.parent)
